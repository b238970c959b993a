//! Signed axis permutations of a 3D grid.
//!
//! A transform `t` maps input grid `v` to output `u` with
//! `u.shape[k] = v.shape[t.perm[k]]`, after which output axis `k` is reversed when
//! `t.flips[k]` is set. The 48 transforms form a group under [`compose`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{voxel_count, LabelMap, ProbMap, Shape3, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewTransform {
    perm: [u8; 3],
    flips: [bool; 3],
}

impl ViewTransform {
    pub const IDENTITY: ViewTransform = ViewTransform {
        perm: [0, 1, 2],
        flips: [false; 3],
    };

    pub fn new(perm: [u8; 3], flips: [bool; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p as usize] {
                return Err(Error::invalid("permutation", format!("{perm:?}")));
            }
            seen[p as usize] = true;
        }
        Ok(ViewTransform { perm, flips })
    }

    pub fn perm(&self) -> [u8; 3] {
        self.perm
    }

    pub fn flips(&self) -> [bool; 3] {
        self.flips
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// All 48 signed permutations in a fixed order.
    pub fn all() -> Vec<ViewTransform> {
        const PERMS: [[u8; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(48);
        for perm in PERMS {
            for bits in 0..8u8 {
                let flips = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
                out.push(ViewTransform { perm, flips });
            }
        }
        out
    }

    pub fn output_shape(&self, shape: Shape3) -> Shape3 {
        [
            shape[self.perm[0] as usize],
            shape[self.perm[1] as usize],
            shape[self.perm[2] as usize],
        ]
    }

    /// Six-character token: three permutation digits then three flip flags (`T`/`F`),
    /// e.g. `201FFT`.
    pub fn token(&self) -> String {
        let mut s = String::with_capacity(6);
        for p in self.perm {
            s.push((b'0' + p) as char);
        }
        for f in self.flips {
            s.push(if f { 'T' } else { 'F' });
        }
        s
    }
}

impl fmt::Display for ViewTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

impl FromStr for ViewTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        let bad = || Error::invalid("view token", format!("{s:?} (expected e.g. 012FFF)"));
        if b.len() != 6 {
            return Err(bad());
        }
        let mut perm = [0u8; 3];
        for k in 0..3 {
            perm[k] = match b[k] {
                b'0'..=b'2' => b[k] - b'0',
                _ => return Err(bad()),
            };
        }
        let mut flips = [false; 3];
        for k in 0..3 {
            flips[k] = match b[3 + k] {
                b'T' => true,
                b'F' => false,
                _ => return Err(bad()),
            };
        }
        ViewTransform::new(perm, flips).map_err(|_| bad())
    }
}

impl Serialize for ViewTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for ViewTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `apply(compose(a, b), v) == apply(a, apply(b, v))`.
pub fn compose(a: ViewTransform, b: ViewTransform) -> ViewTransform {
    let mut perm = [0u8; 3];
    let mut flips = [false; 3];
    for m in 0..3 {
        let mid = a.perm[m] as usize;
        perm[m] = b.perm[mid];
        flips[m] = a.flips[m] ^ b.flips[mid];
    }
    ViewTransform { perm, flips }
}

pub fn inverse(t: ViewTransform) -> ViewTransform {
    let mut perm = [0u8; 3];
    let mut flips = [false; 3];
    for m in 0..3 {
        let src = t.perm[m] as usize;
        perm[src] = m as u8;
        flips[src] = t.flips[m];
    }
    ViewTransform { perm, flips }
}

/// Remaps a flat row-major grid; shared by every grid type.
pub(crate) fn remap<E: Copy>(t: ViewTransform, shape: Shape3, data: &[E]) -> (Shape3, Vec<E>) {
    debug_assert_eq!(data.len(), voxel_count(shape));
    if t.is_identity() {
        return (shape, data.to_vec());
    }
    let in_stride = [shape[1] * shape[2], shape[2], 1];
    let out_shape = t.output_shape(shape);
    let mut step = [0isize; 3];
    let mut base = 0isize;
    for k in 0..3 {
        let s = in_stride[t.perm[k] as usize] as isize;
        if t.flips[k] {
            base += (out_shape[k] as isize - 1) * s;
            step[k] = -s;
        } else {
            step[k] = s;
        }
    }
    let mut out = Vec::with_capacity(data.len());
    let mut off0 = base;
    for _ in 0..out_shape[0] {
        let mut off1 = off0;
        for _ in 0..out_shape[1] {
            let mut off2 = off1;
            for _ in 0..out_shape[2] {
                out.push(data[off2 as usize]);
                off2 += step[2];
            }
            off1 += step[1];
        }
        off0 += step[0];
    }
    (out_shape, out)
}

fn permute3(t: ViewTransform, v: [f64; 3]) -> [f64; 3] {
    [v[t.perm[0] as usize], v[t.perm[1] as usize], v[t.perm[2] as usize]]
}

/// Grids that can be reoriented by a [`ViewTransform`].
pub trait Orientable: Sized {
    fn apply_transform(&self, t: ViewTransform) -> Self;
}

impl<T: Real> Orientable for Volume3D<T> {
    fn apply_transform(&self, t: ViewTransform) -> Self {
        let (shape, data) = remap(t, self.shape(), self.data());
        Volume3D::from_parts_unchecked(shape, data, permute3(t, self.spacing), permute3(t, self.origin))
    }
}

impl Orientable for LabelMap {
    fn apply_transform(&self, t: ViewTransform) -> Self {
        let (shape, data) = remap(t, self.shape(), self.data());
        LabelMap::from_parts_unchecked(shape, data, self.n_classes())
    }
}

impl<T: Real> Orientable for ProbMap<T> {
    fn apply_transform(&self, t: ViewTransform) -> Self {
        let mut out = Vec::with_capacity(self.data().len());
        let mut shape = self.shape();
        for c in 0..self.n_classes() {
            let (s, d) = remap(t, self.shape(), self.channel(c));
            shape = s;
            out.extend_from_slice(&d);
        }
        ProbMap::from_parts_unchecked(self.n_classes(), shape, out)
    }
}

/// Reorients a grid; the channel axis of probability maps is left alone.
pub fn apply<V: Orientable>(t: ViewTransform, v: &V) -> V {
    v.apply_transform(t)
}

/// Reorients a channel-major `(C, D, H, W)` buffer.
pub(crate) fn apply_channels<E: Copy>(t: ViewTransform, shape: Shape3, channels: usize, data: &[E]) -> (Shape3, Vec<E>) {
    let n = voxel_count(shape);
    let mut out = Vec::with_capacity(data.len());
    let mut out_shape = t.output_shape(shape);
    for c in 0..channels {
        let (s, d) = remap(t, shape, &data[c * n..(c + 1) * n]);
        out_shape = s;
        out.extend_from_slice(&d);
    }
    (out_shape, out)
}

/// Ordered, duplicate-free list of transforms; the first is always the identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    transforms: Vec<ViewTransform>,
    names: Vec<String>,
}

impl ViewSet {
    pub fn new(transforms: Vec<ViewTransform>, names: Vec<String>) -> Result<Self> {
        if transforms.is_empty() || !transforms[0].is_identity() {
            return Err(Error::invalid("view set", "first view must be the identity"));
        }
        if names.len() != transforms.len() {
            return Err(Error::invalid("view set", "one name per transform"));
        }
        for (i, t) in transforms.iter().enumerate() {
            if transforms[..i].contains(t) {
                return Err(Error::invalid("view set", format!("duplicate transform {t}")));
            }
        }
        Ok(ViewSet { transforms, names })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[ViewTransform] {
        &self.transforms
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> ViewTransform {
        self.transforms[i]
    }
}

pub const AXIAL: ViewTransform = ViewTransform::IDENTITY;
/// Brings the H axis to the slice (through-plane) position.
pub const CORONAL: ViewTransform = ViewTransform {
    perm: [1, 2, 0],
    flips: [false; 3],
};
/// Brings the W axis to the slice (through-plane) position.
pub const SAGITTAL: ViewTransform = ViewTransform {
    perm: [2, 0, 1],
    flips: [false; 3],
};
/// Left-right flip along the canonical W axis.
pub const HFLIP: ViewTransform = ViewTransform {
    perm: [0, 1, 2],
    flips: [false, false, true],
};

/// Standard 2-, 3- or 6-view sets.
///
/// The 6-view set appends each of the three planes composed with a horizontal
/// flip applied in canonical orientation.
pub fn standard_view_set(n: usize) -> Result<ViewSet> {
    let base = [(AXIAL, "axial"), (CORONAL, "coronal"), (SAGITTAL, "sagittal")];
    let (ts, names): (Vec<_>, Vec<_>) = match n {
        2 | 3 => base[..n].iter().map(|&(t, s)| (t, s.to_string())).unzip(),
        6 => base
            .iter()
            .map(|&(t, s)| (t, s.to_string()))
            .chain(base.iter().map(|&(t, s)| (compose(t, HFLIP), format!("{s}-flip"))))
            .unzip(),
        _ => return Err(Error::UnsupportedViewCount(n)),
    };
    ViewSet::new(ts, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3) -> Volume3D<f64> {
        let mut i = 0.0;
        Volume3D::from_fn(shape, |_, _, _| {
            i += 1.0;
            i
        })
    }

    #[test]
    fn identity_is_bitwise() {
        let v = ramp([2, 3, 4]);
        assert_eq!(apply(ViewTransform::IDENTITY, &v), v);
    }

    #[test]
    fn permutation_shape() {
        let t = ViewTransform::new([2, 0, 1], [false; 3]).unwrap();
        assert_eq!(apply(t, &ramp([2, 3, 4])).shape(), [4, 2, 3]);
    }

    #[test]
    fn spacing_follows_axes() {
        let mut v = ramp([2, 3, 4]);
        v.spacing = [1.0, 2.0, 3.0];
        let t = ViewTransform::new([2, 0, 1], [true, false, false]).unwrap();
        assert_eq!(apply(t, &v).spacing, [3.0, 1.0, 2.0]);
    }

    #[test]
    fn inverse_of_identity_and_flip() {
        assert_eq!(inverse(ViewTransform::IDENTITY), ViewTransform::IDENTITY);
        let f = ViewTransform::new([0, 1, 2], [true, false, true]).unwrap();
        assert_eq!(inverse(f), f);
    }

    #[test]
    fn compose_identity_and_inverse() {
        for t in ViewTransform::all() {
            assert_eq!(compose(t, ViewTransform::IDENTITY), t);
            assert_eq!(compose(ViewTransform::IDENTITY, t), t);
            assert_eq!(compose(t, inverse(t)), ViewTransform::IDENTITY);
            assert_eq!(compose(inverse(t), t), ViewTransform::IDENTITY);
        }
    }

    #[test]
    fn token_round_trip() {
        for t in ViewTransform::all() {
            let tok = t.token();
            assert_eq!(tok.len(), 6);
            assert_eq!(tok.parse::<ViewTransform>().unwrap(), t);
        }
        assert!("011FFF".parse::<ViewTransform>().is_err());
        assert!("012FF".parse::<ViewTransform>().is_err());
        assert!("012FFX".parse::<ViewTransform>().is_err());
    }

    #[test]
    fn standard_sets() {
        assert!(standard_view_set(4).is_err());
        let s3 = standard_view_set(3).unwrap();
        // axis 0 lands on each of the three output axes
        let mut dest: Vec<usize> = s3
            .transforms()
            .iter()
            .map(|t| t.perm().iter().position(|&p| p == 0).unwrap())
            .collect();
        dest.sort();
        assert_eq!(dest, vec![0, 1, 2]);

        let s2 = standard_view_set(2).unwrap();
        let s6 = standard_view_set(6).unwrap();
        assert!(s2.transforms().iter().all(|t| s3.transforms().contains(t)));
        assert!(s3.transforms().iter().all(|t| s6.transforms().contains(t)));

        let flip_counts: Vec<usize> = s6
            .transforms()
            .iter()
            .map(|t| t.flips().iter().filter(|&&f| f).count())
            .collect();
        assert_eq!(flip_counts.iter().filter(|&&c| c == 0).count(), 3);
        assert_eq!(flip_counts.iter().filter(|&&c| c == 1).count(), 3);
    }

    #[test]
    fn horizontal_flip_reverses_canonical_w() {
        // Each flipped view sees the canonical W axis reversed.
        let v = ramp([3, 4, 5]);
        let s6 = standard_view_set(6).unwrap();
        let flipped = apply(HFLIP, &v);
        for i in 0..3 {
            let direct = apply(s6.get(i + 3), &v);
            assert_eq!(direct, apply(s6.get(i), &flipped));
        }
    }
}
