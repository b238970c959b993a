//! Preprocessing, patch sampling, sliding-window inference and ensembling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Segmenter;
use crate::real::Real;
use crate::views::{apply, inverse, ViewSet};
use crate::volume::{flat_index, voxel_count, Case, LabelMap, ProbMap, Shape3, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub size: Shape3,
    /// Probability of centring a patch on a foreground voxel.
    pub fg_ratio: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { size: [32; 3], fg_ratio: 0.5 }
    }
}

impl PatchSpec {
    pub fn validate(&self, divisor: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fg_ratio) {
            return Err(Error::invalid("fg_ratio", format!("{} outside [0, 1]", self.fg_ratio)));
        }
        if self.size.iter().any(|&s| s == 0 || s % divisor != 0) {
            return Err(Error::Divisibility { shape: self.size, divisor });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    #[default]
    UniformAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub size: Shape3,
    pub stride: Shape3,
    #[serde(default)]
    pub blend: Blend,
}

impl WindowSpec {
    /// Windows overlapping by half their extent.
    pub fn half_overlap(size: Shape3) -> Self {
        WindowSpec { size, stride: size.map(|s| (s / 2).max(1)), blend: Blend::UniformAverage }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if self.stride[k] == 0 || self.stride[k] > self.size[k] {
                return Err(Error::invalid(
                    "window",
                    format!("stride {:?} must satisfy 1 <= stride <= size {:?}", self.stride, self.size),
                ));
            }
        }
        Ok(())
    }
}

// --- resampling -----------------------------------------------------------

/// Source sample positions for each output index along one axis: `(i0, i1, frac)`.
/// Voxel centres are aligned: output `o` sits at input index `(o + ½)·t/s − ½`.
fn axis_taps(n_in: usize, n_out: usize, in_mm: f64, out_mm: f64) -> Vec<(usize, usize, f64)> {
    let ratio = out_mm / in_mm;
    (0..n_out)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Resamples to `target_mm` isotropic spacing: trilinear for intensities,
/// nearest-neighbour for labels.
pub fn resample_isotropic(case: &Case, target_mm: f64) -> Result<Case> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::invalid("target spacing", format!("{target_mm}")));
    }
    let in_shape = case.volume.shape();
    let sp = case.volume.spacing;
    let mut out_shape = [0usize; 3];
    for k in 0..3 {
        let n = (in_shape[k] as f64 * sp[k] / target_mm).round();
        if n < 1.0 {
            return Err(Error::invalid(
                "resample",
                format!("axis {k} of {in_shape:?} at {:.3} mm rounds to zero voxels at {target_mm} mm", sp[k]),
            ));
        }
        out_shape[k] = n as usize;
    }
    let taps: Vec<_> = (0..3).map(|k| axis_taps(in_shape[k], out_shape[k], sp[k], target_mm)).collect();
    let src = case.volume.data();
    let at = |z: usize, y: usize, x: usize| src[flat_index(in_shape, z, y, x)] as f64;
    let mut data = Vec::with_capacity(voxel_count(out_shape));
    for &(z0, z1, fz) in &taps[0] {
        for &(y0, y1, fy) in &taps[1] {
            for &(x0, x1, fx) in &taps[2] {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                data.push(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz) as f32);
            }
        }
    }
    let volume = Volume3D::with_geometry(out_shape, data, [target_mm; 3], case.volume.origin)?;
    let label = case.label.as_ref().map(|l| {
        let nearest = |(i0, i1, f): (usize, usize, f64)| if f >= 0.5 { i1 } else { i0 };
        let mut out = Vec::with_capacity(voxel_count(out_shape));
        for &tz in &taps[0] {
            for &ty in &taps[1] {
                for &tx in &taps[2] {
                    out.push(l.get(nearest(tz), nearest(ty), nearest(tx)));
                }
            }
        }
        LabelMap::from_parts_unchecked(out_shape, out, l.n_classes())
    });
    Ok(Case { id: case.id.clone(), volume, label, domain_tag: case.domain_tag.clone() })
}

/// Zero-mean, unit-variance intensities; a constant volume maps to all zeros.
pub fn normalize_intensity<T: Real>(v: &Volume3D<T>) -> Volume3D<T> {
    let n = v.data().len() as f64;
    let mean = v.data().iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = v.data().iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 0.0 };
    let data = v.data().iter().map(|x| T::of((x.as_f64() - mean) * scale)).collect();
    Volume3D::from_parts_unchecked(v.shape(), data, v.spacing, v.origin)
}

/// Resample then normalize, the standard preprocessing for every case.
pub fn preprocess(case: &Case, target_mm: f64) -> Result<Case> {
    let mut c = resample_isotropic(case, target_mm)?;
    c.volume = normalize_intensity(&c.volume);
    Ok(c)
}

// --- patches --------------------------------------------------------------

/// A sampled patch together with how it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDraw {
    pub volume: Volume3D<f32>,
    pub label: Option<LabelMap>,
    pub center: [usize; 3],
    /// Whether the foreground branch chose the centre.
    pub fg_centered: bool,
}

/// Copies the `size` window whose corner is `corner` (may be negative), zero padded.
pub fn extract<E: Copy + Default>(shape: Shape3, data: &[E], corner: [isize; 3], size: Shape3) -> Vec<E> {
    let mut out = vec![E::default(); voxel_count(size)];
    for z in 0..size[0] {
        let zi = corner[0] + z as isize;
        if zi < 0 || zi >= shape[0] as isize {
            continue;
        }
        for y in 0..size[1] {
            let yi = corner[1] + y as isize;
            if yi < 0 || yi >= shape[1] as isize {
                continue;
            }
            let x_lo = (-corner[2]).max(0) as usize;
            let x_hi = ((shape[2] as isize - corner[2]).min(size[2] as isize)).max(0) as usize;
            if x_hi <= x_lo {
                continue;
            }
            let src = flat_index(shape, zi as usize, yi as usize, (corner[2] + x_lo as isize) as usize);
            let dst = flat_index(size, z, y, x_lo);
            out[dst..dst + (x_hi - x_lo)].copy_from_slice(&data[src..src + (x_hi - x_lo)]);
        }
    }
    out
}

pub fn sample_patch_draw(case: &Case, spec: &PatchSpec, rng: &mut impl Rng) -> PatchDraw {
    let shape = case.shape();
    let fg: Vec<usize> = match &case.label {
        Some(l) => l.data().iter().enumerate().filter(|(_, &v)| v > 0).map(|(i, _)| i).collect(),
        None => Vec::new(),
    };
    let want_fg = rng.random::<f64>() < spec.fg_ratio;
    let (flat, fg_centered) = if want_fg && !fg.is_empty() {
        (fg[rng.random_range(0..fg.len())], true)
    } else {
        (rng.random_range(0..voxel_count(shape)), false)
    };
    let center = [flat / (shape[1] * shape[2]), (flat / shape[2]) % shape[1], flat % shape[2]];
    let corner = [0, 1, 2].map(|k| center[k] as isize - (spec.size[k] / 2) as isize);
    let data = extract(shape, case.volume.data(), corner, spec.size);
    let volume = Volume3D::from_parts_unchecked(spec.size, data, case.volume.spacing, [0.0; 3]);
    let label = case.label.as_ref().map(|l| {
        LabelMap::from_parts_unchecked(spec.size, extract(shape, l.data(), corner, spec.size), l.n_classes())
    });
    PatchDraw { volume, label, center, fg_centered }
}

/// Draws one training patch. Labeled cases are foreground-centred with
/// probability `fg_ratio`; otherwise (or without foreground) the centre is uniform.
pub fn sample_patch(case: &Case, spec: &PatchSpec, rng: &mut impl Rng) -> (Volume3D<f32>, Option<LabelMap>) {
    let d = sample_patch_draw(case, spec, rng);
    (d.volume, d.label)
}

// --- inference ------------------------------------------------------------

/// Window start offsets along one axis; the last window is clamped to the edge.
pub fn window_starts(n: usize, size: usize, stride: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + size < n).collect();
    starts.push(n - size);
    starts.dedup();
    starts
}

/// Full-volume prediction by uniform averaging of overlapping window predictions.
///
/// Volumes smaller than the window along an axis are zero padded, predicted and
/// cropped back.
pub fn sliding_window_predict<T: Real, M: Segmenter<T> + ?Sized>(
    model: &M,
    volume: &Volume3D<T>,
    w: &WindowSpec,
) -> Result<ProbMap<T>> {
    w.validate()?;
    let shape = volume.shape();
    let padded_shape = [0, 1, 2].map(|k| shape[k].max(w.size[k]));
    if padded_shape != shape {
        let data = extract(shape, volume.data(), [0; 3], padded_shape);
        let padded = Volume3D::from_parts_unchecked(padded_shape, data, volume.spacing, volume.origin);
        let full = sliding_window_predict(model, &padded, w)?;
        let c = full.n_classes();
        let n_pad = voxel_count(padded_shape);
        let mut out = Vec::with_capacity(c * voxel_count(shape));
        for k in 0..c {
            out.extend(extract(padded_shape, &full.data()[k * n_pad..(k + 1) * n_pad], [0; 3], shape));
        }
        return Ok(ProbMap::from_parts_unchecked(c, shape, out));
    }

    let starts: Vec<Vec<usize>> = (0..3).map(|k| window_starts(shape[k], w.size[k], w.stride[k])).collect();
    let mut corners = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                corners.push([z, y, x]);
            }
        }
    }
    let preds = crate::par::try_map_indexed(corners.len(), |i| {
        let c = corners[i].map(|v| v as isize);
        let patch = Volume3D::from_parts_unchecked(w.size, extract(shape, volume.data(), c, w.size), volume.spacing, [0.0; 3]);
        model.predict_patch(&patch)
    })?;

    let n_classes = model.n_classes();
    let n = voxel_count(shape);
    let wn = voxel_count(w.size);
    let mut acc = vec![0.0f64; n_classes * n];
    let mut count = vec![0u32; n];
    for (corner, p) in corners.iter().zip(&preds) {
        for z in 0..w.size[0] {
            for y in 0..w.size[1] {
                let dst = flat_index(shape, corner[0] + z, corner[1] + y, corner[2]);
                let src = flat_index(w.size, z, y, 0);
                for x in 0..w.size[2] {
                    count[dst + x] += 1;
                }
                for c in 0..n_classes {
                    let s = &p.data()[c * wn + src..c * wn + src + w.size[2]];
                    for (a, &v) in acc[c * n + dst..c * n + dst + w.size[2]].iter_mut().zip(s) {
                        *a += v.as_f64();
                    }
                }
            }
        }
    }
    let mut out = vec![T::zero(); n_classes * n];
    for v in 0..n {
        let total: f64 = (0..n_classes).map(|c| acc[c * n + v]).sum();
        for c in 0..n_classes {
            out[c * n + v] = T::of(acc[c * n + v] / total);
        }
    }
    Ok(ProbMap::from_parts_unchecked(n_classes, shape, out))
}

/// Canonical-orientation predictions of every view model:
/// `p_i = T_i⁻¹(swp(m_i, T_i(volume)))`.
pub fn multi_view_predict<T: Real, M: Segmenter<T>>(
    models: &[M],
    views: &ViewSet,
    volume: &Volume3D<T>,
    w: &WindowSpec,
) -> Result<Vec<ProbMap<T>>> {
    if models.len() != views.len() {
        return Err(Error::shape("models vs views", &[views.len()], &[models.len()]));
    }
    models
        .iter()
        .zip(views.transforms())
        .map(|(m, &t)| {
            let p = sliding_window_predict(m, &apply(t, volume), w)?;
            Ok(apply(inverse(t), &p))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    #[default]
    Average,
    Majority,
}

impl std::str::FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(EnsembleMode::Average),
            "majority" => Ok(EnsembleMode::Majority),
            _ => Err(Error::invalid("ensemble mode", format!("{s:?} (expected average or majority)"))),
        }
    }
}

/// Combines canonical predictions into one label map.
///
/// `Average` takes the argmax of the mean map; `Majority` takes the modal per-view
/// argmax with ties going to the lowest class index.
pub fn ensemble<T: Real>(preds: &[ProbMap<T>], mode: EnsembleMode) -> Result<LabelMap> {
    let first = preds.first().ok_or(Error::TooFew { what: "predictions", needed: 1, got: 0 })?;
    for p in &preds[1..] {
        if p.shape() != first.shape() || p.n_classes() != first.n_classes() {
            return Err(Error::shape("ensemble member", &first.shape(), &p.shape()));
        }
    }
    let c = first.n_classes();
    let n = first.voxels();
    match mode {
        EnsembleMode::Average => {
            let mut acc = vec![0.0f64; c * n];
            for p in preds {
                for (a, &v) in acc.iter_mut().zip(p.data()) {
                    *a += v.as_f64();
                }
            }
            let inv = 1.0 / preds.len() as f64;
            let mean = ProbMap::from_parts_unchecked(c, first.shape(), acc.into_iter().map(|v| v * inv).collect::<Vec<f64>>());
            Ok(mean.argmax())
        }
        EnsembleMode::Majority => {
            let votes: Vec<LabelMap> = preds.iter().map(|p| p.argmax()).collect();
            let mut out = vec![0u8; n];
            let mut tally = vec![0u32; c];
            for (v, o) in out.iter_mut().enumerate() {
                tally.iter_mut().for_each(|t| *t = 0);
                for lm in &votes {
                    tally[lm.data()[v] as usize] += 1;
                }
                let mut best = 0;
                for k in 1..c {
                    if tally[k] > tally[best] {
                        best = k;
                    }
                }
                *o = best as u8;
            }
            Ok(LabelMap::from_parts_unchecked(first.shape(), out, c))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_resample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Volume3D::from_fn([3, 4, 5], |_, _, _| rng.random_range(-1.0f32..1.0));
        let case = Case { id: "a".into(), volume: v.clone(), label: None, domain_tag: String::new() };
        let out = resample_isotropic(&case, 1.0).unwrap();
        assert_eq!(out.volume.shape(), v.shape());
        for (a, b) in out.volume.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ramp_downsample_hits_midpoints() {
        // spacing 0.5 mm resampled to 1 mm halves axis 2; each output is the mean of a pair
        let v = Volume3D::with_geometry([1, 1, 8], (0..8).map(|i| i as f32).collect(), [1.0, 1.0, 0.5], [0.0; 3]).unwrap();
        let case = Case { id: "a".into(), volume: v, label: None, domain_tag: String::new() };
        let out = resample_isotropic(&case, 1.0).unwrap();
        assert_eq!(out.volume.shape(), [1, 1, 4]);
        assert_eq!(out.volume.data(), &[0.5, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn resample_rejects_degenerate() {
        let v = Volume3D::with_geometry([1, 1, 1], vec![1.0f32], [0.1, 1.0, 1.0], [0.0; 3]).unwrap();
        let case = Case { id: "a".into(), volume: v, label: None, domain_tag: String::new() };
        assert!(resample_isotropic(&case, 1.0).is_err());
    }

    #[test]
    fn normalize_two_values() {
        let v = Volume3D::new([1, 1, 4], vec![0.0f64, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(normalize_intensity(&v).data(), &[-1.0, 1.0, -1.0, 1.0]);
        let c = Volume3D::new([1, 1, 3], vec![5.0f64; 3]).unwrap();
        assert_eq!(normalize_intensity(&c).data(), &[0.0; 3]);
    }

    #[test]
    fn window_start_lists() {
        assert_eq!(window_starts(32, 16, 8), vec![0, 8, 16]);
        assert_eq!(window_starts(32, 16, 16), vec![0, 16]);
        assert_eq!(window_starts(20, 16, 8), vec![0, 4]);
        assert_eq!(window_starts(10, 16, 8), vec![0]);
        assert_eq!(window_starts(16, 16, 8), vec![0]);
    }

    #[test]
    fn ensemble_modes() {
        let p = |a: f64| ProbMap::<f64>::new(2, [1, 1, 1], vec![a, 1.0 - a]).unwrap();
        let preds = [p(0.4), p(0.4), p(0.9)];
        // mean p0 = 0.5667 -> class 0; votes 2:1 for class 1
        assert_eq!(ensemble(&preds, EnsembleMode::Average).unwrap().data(), &[0]);
        assert_eq!(ensemble(&preds, EnsembleMode::Majority).unwrap().data(), &[1]);
        let single = [p(0.3)];
        assert_eq!(ensemble(&single, EnsembleMode::Average).unwrap().data(), &[1]);
        assert_eq!(ensemble(&single, EnsembleMode::Majority).unwrap().data(), &[1]);
        assert!(ensemble::<f64>(&[], EnsembleMode::Average).is_err());
        // tie between two views goes to the lowest class
        assert_eq!(ensemble(&[p(0.9), p(0.1)], EnsembleMode::Majority).unwrap().data(), &[0]);
    }
}
