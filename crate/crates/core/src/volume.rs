//! Volumes, label maps, probability maps and dataset splits.
//!
//! All grids are stored row-major over `(D, H, W)`; probability maps prepend a
//! channel axis and are stored channel-major `(C, D, H, W)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Spatial shape `(D, H, W)`.
pub type Shape3 = [usize; 3];

#[inline]
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid("shape", format!("{shape:?} has a zero dimension")));
    }
    Ok(())
}

/// Scalar intensity grid with physical metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D<T = f32> {
    shape: Shape3,
    data: Vec<T>,
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    /// Physical offset; carried along but never used for computation.
    pub origin: [f64; 3],
}

impl<T: Real> Volume3D<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        Self::with_geometry(shape, data, [1.0; 3], [0.0; 3])
    }

    pub fn with_geometry(
        shape: Shape3,
        data: Vec<T>,
        spacing: [f64; 3],
        origin: [f64; 3],
    ) -> Result<Self> {
        let v = Volume3D {
            shape,
            data,
            spacing,
            origin,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(shape: Shape3) -> Self {
        Volume3D {
            shape,
            data: vec![T::zero(); voxel_count(shape)],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume3D {
            shape,
            data,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.shape)?;
        if self.data.len() != voxel_count(self.shape) {
            return Err(Error::shape(
                "volume data length",
                &[voxel_count(self.shape)],
                &[self.data.len()],
            ));
        }
        if let Some(bad) = self.spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid("spacing", format!("component {bad} is not positive")));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[flat_index(self.shape, z, y, x)]
    }

    pub fn cast<U: Real>(&self) -> Volume3D<U> {
        Volume3D {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    pub(crate) fn from_parts_unchecked(
        shape: Shape3,
        data: Vec<T>,
        spacing: [f64; 3],
        origin: [f64; 3],
    ) -> Self {
        debug_assert_eq!(data.len(), voxel_count(shape));
        Volume3D {
            shape,
            data,
            spacing,
            origin,
        }
    }
}

/// Integer class grid; class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Shape3,
    data: Vec<u8>,
    n_classes: usize,
}

impl LabelMap {
    pub fn new(shape: Shape3, data: Vec<u8>, n_classes: usize) -> Result<Self> {
        let l = LabelMap {
            shape,
            data,
            n_classes,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn zeros(shape: Shape3, n_classes: usize) -> Self {
        LabelMap {
            shape,
            data: vec![0; voxel_count(shape)],
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.shape)?;
        if !(2..=256).contains(&self.n_classes) {
            return Err(Error::invalid(
                "n_classes",
                format!("{} is outside 2..=256", self.n_classes),
            ));
        }
        if self.data.len() != voxel_count(self.shape) {
            return Err(Error::shape(
                "label data length",
                &[voxel_count(self.shape)],
                &[self.data.len()],
            ));
        }
        if let Some(index) = self
            .data
            .iter()
            .position(|&v| v as usize >= self.n_classes)
        {
            return Err(Error::ClassOutOfRange {
                value: self.data[index] as u32,
                n_classes: self.n_classes,
                index,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[flat_index(self.shape, z, y, x)]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }

    pub(crate) fn from_parts_unchecked(shape: Shape3, data: Vec<u8>, n_classes: usize) -> Self {
        debug_assert_eq!(data.len(), voxel_count(shape));
        LabelMap {
            shape,
            data,
            n_classes,
        }
    }
}

/// Per-voxel class probabilities, channel-major `(C, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T = f32> {
    n_classes: usize,
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    pub fn new(n_classes: usize, shape: Shape3, data: Vec<T>) -> Result<Self> {
        let p = ProbMap {
            n_classes,
            shape,
            data,
        };
        p.validate()?;
        Ok(p)
    }

    /// Constant map with the same probability vector at every voxel.
    pub fn constant(shape: Shape3, probs: &[T]) -> Result<Self> {
        let n = voxel_count(shape);
        let mut data = Vec::with_capacity(n * probs.len());
        for &p in probs {
            data.extend(std::iter::repeat(p).take(n));
        }
        Self::new(probs.len(), shape, data)
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.shape)?;
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes", "a probability map needs at least 2 channels"));
        }
        let n = voxel_count(self.shape);
        if self.data.len() != n * self.n_classes {
            return Err(Error::shape(
                "probability map data length",
                &[n * self.n_classes],
                &[self.data.len()],
            ));
        }
        let tol = T::SIMPLEX_TOL;
        for (index, v) in self.data.iter().enumerate() {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if v < -tol || v > 1.0 + tol {
                return Err(Error::invalid(
                    "probability",
                    format!("value {v} at flat index {index} is outside [0, 1]"),
                ));
            }
        }
        for voxel in 0..n {
            let s: f64 = (0..self.n_classes)
                .map(|c| self.data[c * n + voxel].as_f64())
                .sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::invalid(
                    "probability",
                    format!("channel sum {s} at voxel {voxel} differs from 1"),
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[c * self.voxels() + flat_index(self.shape, z, y, x)]
    }

    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.voxels();
        let mut best = vec![0u8; n];
        let mut best_val = self.channel(0).to_vec();
        for c in 1..self.n_classes {
            for (i, &v) in self.channel(c).iter().enumerate() {
                if v > best_val[i] {
                    best_val[i] = v;
                    best[i] = c as u8;
                }
            }
        }
        LabelMap::from_parts_unchecked(self.shape, best, self.n_classes)
    }

    pub fn cast<U: Real>(&self) -> ProbMap<U> {
        ProbMap {
            n_classes: self.n_classes,
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(n_classes: usize, shape: Shape3, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), n_classes * voxel_count(shape));
        ProbMap {
            n_classes,
            shape,
            data,
        }
    }
}

/// One-hot encoding of a label map.
pub fn one_hot<T: Real>(label: &LabelMap) -> ProbMap<T> {
    let n = voxel_count(label.shape);
    let mut data = vec![T::zero(); n * label.n_classes];
    for (i, &c) in label.data.iter().enumerate() {
        data[c as usize * n + i] = T::one();
    }
    ProbMap::from_parts_unchecked(label.n_classes, label.shape, data)
}

/// A volume with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume3D<f32>,
    pub label: Option<LabelMap>,
    /// Provenance tag: domain name plus a recipe hash for synthetic data.
    pub domain_tag: String,
}

impl Case {
    pub fn shape(&self) -> Shape3 {
        self.volume.shape()
    }
}

/// Returns the case unchanged if every volume and label invariant holds.
pub fn validate_case(case: Case) -> Result<Case> {
    case.volume.validate()?;
    if let Some(label) = &case.label {
        if label.shape() != case.volume.shape() {
            return Err(Error::shape("label vs volume", &case.volume.shape(), &label.shape()));
        }
        label.validate()?;
    }
    Ok(case)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Ssl,
    Uda,
    UdaNoSource,
    SupervisedOnly,
    SelfTrain,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ssl => "SSL",
            Mode::Uda => "UDA",
            Mode::UdaNoSource => "UDA_NO_SOURCE",
            Mode::SupervisedOnly => "SUPERVISED_ONLY",
            Mode::SelfTrain => "SELF_TRAIN",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labeled set `S` and unlabeled set `U` (or target set `T` under domain adaptation).
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<Case>,
    pub mode: Mode,
}

impl DatasetSplit {
    pub fn new(labeled: Vec<Case>, unlabeled: Vec<Case>, mode: Mode) -> Result<Self> {
        if labeled.is_empty() && mode != Mode::UdaNoSource {
            return Err(Error::TooFew {
                what: "labeled cases",
                needed: 1,
                got: 0,
            });
        }
        if unlabeled.is_empty() && mode != Mode::SupervisedOnly {
            return Err(Error::TooFew {
                what: "unlabeled cases",
                needed: 1,
                got: 0,
            });
        }
        if let Some(c) = labeled.iter().find(|c| c.label.is_none()) {
            return Err(Error::invalid("labeled set", format!("case {} has no label", c.id)));
        }
        let ids: std::collections::HashSet<&str> = labeled.iter().map(|c| c.id.as_str()).collect();
        if let Some(c) = unlabeled.iter().find(|c| ids.contains(c.id.as_str())) {
            return Err(Error::invalid(
                "split",
                format!("case {} is both labeled and unlabeled", c.id),
            ));
        }
        Ok(DatasetSplit {
            labeled,
            unlabeled,
            mode,
        })
    }
}
