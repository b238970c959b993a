//! Signed axis permutations checked against a brute-force index-map oracle.

use proptest::prelude::*;
use umct::views::{apply, compose, inverse, standard_view_set, ViewTransform};
use umct::{Shape3, Volume3D};

/// Output voxel `o` of `t` reads input voxel `oracle_source(t, in_shape, o)`.
fn oracle_source(t: ViewTransform, in_shape: Shape3, o: [usize; 3]) -> [usize; 3] {
    let (p, f) = (t.perm(), t.flips());
    let mut src = [0usize; 3];
    for k in 0..3 {
        let n = in_shape[p[k] as usize];
        src[p[k] as usize] = if f[k] { n - 1 - o[k] } else { o[k] };
    }
    src
}

fn oracle_apply(t: ViewTransform, v: &Volume3D<f64>) -> Volume3D<f64> {
    let s = v.shape();
    let p = t.perm();
    let out = [s[p[0] as usize], s[p[1] as usize], s[p[2] as usize]];
    Volume3D::from_fn(out, |z, y, x| {
        let [a, b, c] = oracle_source(t, s, [z, y, x]);
        v.get(a, b, c)
    })
}

fn ramp(shape: Shape3) -> Volume3D<f64> {
    Volume3D::from_fn(shape, |z, y, x| (z * 100 + y * 10 + x) as f64)
}

#[test]
fn there_are_48_distinct_transforms() {
    let all = ViewTransform::all();
    assert_eq!(all.len(), 48);
    let mut tokens: Vec<String> = all.iter().map(|t| t.token()).collect();
    tokens.sort();
    tokens.dedup();
    assert_eq!(tokens.len(), 48);
}

#[test]
fn every_transform_matches_the_oracle_on_a_ramp() {
    let v = ramp([2, 3, 4]);
    for t in ViewTransform::all() {
        let got = apply(t, &v);
        let want = oracle_apply(t, &v);
        assert_eq!(got.shape(), want.shape(), "{t}");
        assert_eq!(got.data(), want.data(), "{t}");
        // where the (0,0,0) corner voxel lands
        let pos = got.data().iter().position(|&x| x == 0.0).unwrap();
        let want_pos = want.data().iter().position(|&x| x == 0.0).unwrap();
        assert_eq!(pos, want_pos, "{t}");
    }
}

#[test]
fn closure_table_matches_the_oracle() {
    let v = ramp([2, 3, 4]);
    let all = ViewTransform::all();
    for &a in &all {
        for &b in &all {
            let c = compose(a, b);
            assert!(all.contains(&c));
            assert_eq!(apply(c, &v).data(), oracle_apply(a, &oracle_apply(b, &v)).data(), "{a} after {b}");
        }
    }
}

#[test]
fn inverse_is_two_sided() {
    for t in ViewTransform::all() {
        assert!(compose(t, inverse(t)).is_identity(), "{t}");
        assert!(compose(inverse(t), t).is_identity(), "{t}");
    }
}

#[test]
fn six_view_set_flip_counts() {
    let set = standard_view_set(6).unwrap();
    let flips: Vec<usize> = set.transforms().iter().map(|t| t.flips().iter().filter(|&&f| f).count()).collect();
    assert_eq!(flips.iter().filter(|&&n| n == 0).count(), 3);
    assert_eq!(flips.iter().filter(|&&n| n == 1).count(), 3);
}

fn volume_5x6x7() -> impl Strategy<Value = Volume3D<f64>> {
    prop::collection::vec(-1e3f64..1e3, 5 * 6 * 7).prop_map(|d| Volume3D::new([5, 6, 7], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn round_trip_is_exact(v in volume_5x6x7()) {
        for t in ViewTransform::all() {
            let back = apply(inverse(t), &apply(t, &v));
            prop_assert_eq!(back.data(), v.data());
            prop_assert_eq!(back.shape(), v.shape());
        }
    }

    #[test]
    fn composition_matches_sequential_application(v in volume_5x6x7(), i in 0usize..48, j in 0usize..48) {
        let all = ViewTransform::all();
        let (a, b) = (all[i], all[j]);
        let (x, y) = (apply(compose(a, b), &v), apply(a, &apply(b, &v)));
        prop_assert_eq!(x.data(), y.data());
    }
}
