//! Procedural 3D phantoms: randomly oriented ellipsoidal organs on a noisy
//! background, with optional low-contrast lesions and a gamma contrast knob for
//! simulating domain shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flat_index, validate_case, voxel_count, Case, LabelMap, Shape3, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomRecipe {
    pub shape: Shape3,
    pub n_classes: usize,
    /// Inclusive range of organ blobs per case.
    pub blob_count: [usize; 2],
    /// Semi-axis length range in voxels.
    pub blob_radius: [f64; 2],
    /// `[mean, std]` per class; index 0 is background.
    pub class_intensity: Vec<[f64; 2]>,
    pub noise_std: f64,
    /// Per-case random offset added to every foreground class mean (std).
    pub intensity_jitter: f64,
    /// Intensities are mapped through `sign(v)·|v|^γ` before blurring.
    pub contrast_gamma: f64,
    /// Chance that an organ blob carries a lesion.
    pub lesion_prob: f64,
    pub lesion_intensity: f64,
    /// Lesion semi-axes relative to the parent blob.
    pub lesion_scale: f64,
    /// Gaussian blur sigma in voxels; 0 disables.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for PhantomRecipe {
    fn default() -> Self {
        PhantomRecipe {
            shape: [32; 3],
            n_classes: 2,
            blob_count: [1, 3],
            blob_radius: [4.0, 9.0],
            class_intensity: vec![[0.2, 0.0], [0.6, 0.05]],
            noise_std: 0.15,
            intensity_jitter: 0.05,
            contrast_gamma: 1.0,
            lesion_prob: 0.0,
            lesion_intensity: 0.3,
            lesion_scale: 0.5,
            smoothing: 0.7,
            seed: 0,
        }
    }
}

impl PhantomRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("phantom recipe", r));
        if self.shape.iter().any(|&s| s == 0) {
            return bad(format!("shape {:?} has a zero axis", self.shape));
        }
        if self.n_classes < 2 || self.n_classes > 255 {
            return bad(format!("n_classes {} outside 2..=255", self.n_classes));
        }
        if self.class_intensity.len() != self.n_classes {
            return bad(format!("{} intensity entries for {} classes", self.class_intensity.len(), self.n_classes));
        }
        if self.blob_count[0] > self.blob_count[1] {
            return bad(format!("blob_count range {:?} is reversed", self.blob_count));
        }
        let [rmin, rmax] = self.blob_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("blob_radius range {:?} invalid", self.blob_radius));
        }
        let min_axis = *self.shape.iter().min().unwrap() as f64;
        if self.blob_count[1] > 0 && 2.0 * rmax + 1.0 > min_axis {
            return bad(format!("radius {rmax} does not fit in shape {:?}", self.shape));
        }
        let finite = self.class_intensity.iter().flatten().all(|v| v.is_finite())
            && [self.noise_std, self.intensity_jitter, self.contrast_gamma, self.lesion_intensity, self.smoothing, self.lesion_scale]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite intensity parameter".into());
        }
        if self.noise_std < 0.0 || self.intensity_jitter < 0.0 || self.smoothing < 0.0 || self.class_intensity.iter().any(|c| c[1] < 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        if self.contrast_gamma <= 0.0 {
            return bad(format!("contrast_gamma {} must be positive", self.contrast_gamma));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return bad(format!("lesion_prob {} outside [0, 1]", self.lesion_prob));
        }
        if !(self.lesion_scale > 0.0 && self.lesion_scale < 1.0) {
            return bad(format!("lesion_scale {} outside (0, 1)", self.lesion_scale));
        }
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                let gap = (self.class_intensity[a][0] - self.class_intensity[b][0]).abs();
                if gap < self.noise_std {
                    return bad(format!("classes {a} and {b} are separated by {gap} < noise std {}", self.noise_std));
                }
            }
        }
        Ok(())
    }

    /// Hash of every field except the seed; identifies the distribution.
    pub fn distribution_tag(&self) -> String {
        let mut r = self.clone();
        r.seed = 0;
        let h = crate::config::config_hash(&r).expect("recipe serializes");
        h[..12].to_string()
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid's principal axes.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3], scale: f64) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for k in 0..3 {
            let q = self.axes[k][0] * d[0] + self.axes[k][1] * d[1] + self.axes[k][2] * d[2];
            let r = self.radii[k] * scale;
            s += (q / r) * (q / r);
        }
        s <= 1.0
    }
}

fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in &mut q {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn gaussian_blur(shape: Shape3, data: &mut [f64], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&k| k != axis).collect();
        for a in 0..shape[others[0]] {
            for b in 0..shape[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|i| data[base + i * stride]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, &k) in kernel.iter().enumerate() {
                        let src = (i as isize + j as isize - radius).clamp(0, n as isize - 1) as usize;
                        acc += k * line[src];
                    }
                    data[base + i * stride] = acc;
                }
            }
        }
    }
}

/// Generates one phantom; a pure function of the recipe.
pub fn generate_phantom(recipe: &PhantomRecipe) -> Result<Case> {
    recipe.validate()?;
    let shape = recipe.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let count = rng.random_range(recipe.blob_count[0]..=recipe.blob_count[1]);
    let [rmin, rmax] = recipe.blob_radius;
    let mut blobs = Vec::with_capacity(count);
    for b in 0..count {
        let class = 1 + (b % (recipe.n_classes - 1)) as u8;
        let radii = [0, 1, 2].map(|_| rng.random_range(rmin..=rmax));
        let axes = random_rotation(&mut rng);
        let center = [0, 1, 2].map(|k| rng.random_range(rmax..=(shape[k] as f64 - 1.0 - rmax)));
        let lesion = rng.random::<f64>() < recipe.lesion_prob;
        blobs.push((class, Ellipsoid { center, radii, axes }, lesion));
    }

    let jitter: Vec<f64> = (0..recipe.n_classes)
        .map(|c| if c == 0 { 0.0 } else { recipe.intensity_jitter * rng.sample::<f64, _>(StandardNormal) })
        .collect();

    let n = voxel_count(shape);
    let mut labels = vec![0u8; n];
    let mut is_lesion = vec![false; n];
    for (class, e, lesion) in &blobs {
        let lo = e.center.map(|c| (c - rmax).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|k| ((e.center[k] + rmax).ceil() as usize).min(shape[k] - 1));
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [z as f64, y as f64, x as f64];
                    if e.contains(p, 1.0) {
                        let i = flat_index(shape, z, y, x);
                        labels[i] = *class;
                        is_lesion[i] = *lesion && e.contains(p, recipe.lesion_scale);
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let c = labels[i] as usize;
        let [mean, std] = recipe.class_intensity[c];
        let base = if is_lesion[i] { recipe.lesion_intensity } else { mean + jitter[c] };
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let v = base + std * z1 + recipe.noise_std * z2;
        data.push(v.signum() * v.abs().powf(recipe.contrast_gamma));
    }
    gaussian_blur(shape, &mut data, recipe.smoothing);

    let tag = recipe.distribution_tag();
    let volume = Volume3D::new(shape, data.into_iter().map(|v| v as f32).collect())?;
    let label = LabelMap::new(shape, labels, recipe.n_classes)?;
    validate_case(Case {
        id: format!("ph{}-{:08}", &tag[..6], recipe.seed),
        volume,
        label: Some(label),
        domain_tag: format!("synthetic:{tag}"),
    })
}

/// `n` phantoms from seeds `seed..seed + n`.
pub fn generate_dataset(n: usize, recipe: &PhantomRecipe, seed: u64) -> Result<Vec<Case>> {
    if n == 0 {
        return Err(Error::TooFew { what: "cases", needed: 1, got: 0 });
    }
    recipe.validate()?;
    crate::par::try_map_indexed(n, |i| {
        let mut r = recipe.clone();
        r.seed = seed + i as u64;
        generate_phantom(&r)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub gamma_delta: f64,
    pub noise_delta: f64,
    pub lesion_prob_delta: f64,
}

impl Default for DomainShift {
    /// Contrast compression, slightly more noise and frequent lesions.
    fn default() -> Self {
        DomainShift { gamma_delta: 2.0, noise_delta: 0.03, lesion_prob_delta: 0.8 }
    }
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift { gamma_delta: 0.0, noise_delta: 0.0, lesion_prob_delta: 0.0 };
}

/// Target-domain recipe derived from a source recipe.
pub fn shift_domain(recipe: &PhantomRecipe, shift: &DomainShift) -> Result<PhantomRecipe> {
    let mut r = recipe.clone();
    r.contrast_gamma += shift.gamma_delta;
    r.noise_std += shift.noise_delta;
    r.lesion_prob += shift.lesion_prob_delta;
    r.validate()?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let r = PhantomRecipe { seed: 3, ..Default::default() };
        assert_eq!(generate_phantom(&r).unwrap(), generate_phantom(&r).unwrap());
        let r2 = PhantomRecipe { seed: 4, ..Default::default() };
        assert_ne!(generate_phantom(&r).unwrap().volume, generate_phantom(&r2).unwrap().volume);
    }

    #[test]
    fn infeasible_recipes() {
        let r = PhantomRecipe { shape: [16, 16, 16], blob_radius: [4.0, 9.0], ..Default::default() };
        assert!(generate_phantom(&r).is_err());
        let r = PhantomRecipe { class_intensity: vec![[0.2, 0.0], [0.25, 0.0]], ..Default::default() };
        assert!(r.validate().is_err());
        let r = PhantomRecipe { class_intensity: vec![[0.2, 0.0]], ..Default::default() };
        assert!(r.validate().is_err());
    }

    #[test]
    fn dataset_matches_single_generation() {
        let r = PhantomRecipe { seed: 99, ..Default::default() };
        let ds = generate_dataset(1, &r, 99).unwrap();
        assert_eq!(ds[0], generate_phantom(&r).unwrap());
        assert!(generate_dataset(0, &r, 0).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let r = PhantomRecipe::default();
        assert_eq!(shift_domain(&r, &DomainShift::NONE).unwrap(), r);
        assert!(shift_domain(&r, &DomainShift { lesion_prob_delta: 2.0, ..DomainShift::NONE }).is_err());
    }

    #[test]
    fn multi_class_phantoms_use_every_class() {
        let r = PhantomRecipe {
            n_classes: 3,
            blob_count: [2, 3],
            class_intensity: vec![[0.1, 0.0], [0.5, 0.02], [0.9, 0.02]],
            ..Default::default()
        };
        let c = generate_phantom(&r).unwrap();
        let l = c.label.unwrap();
        for k in 1..3u8 {
            assert!(l.data().contains(&k));
        }
    }
}
