//! Uncertainty-aware multi-view co-training (UMCT) for volumetric segmentation.
//!
//! The crate is organized bottom-up:
//!
//! * [`volume`] – volumes, label maps, probability maps and dataset splits.
//! * [`views`] – the 48-element signed axis-permutation group used to build views.
//! * [`nn`] – a small encoder-decoder with asymmetric kernels, MC dropout and SGD.
//! * [`uncertainty`], [`fusion`], [`losses`] – the co-training objective pieces.
//! * [`pipeline`] – preprocessing, patch sampling, sliding-window inference, ensembling.
//! * [`trainer`] – two-stage training in all supported modes, experiment driver.
//! * [`synth`] – procedural phantoms with controllable domain shift.
//! * [`metrics`] – Dice coefficient and the Wilcoxon signed-rank test.

pub mod config;
pub mod container;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod real;
pub mod synth;
pub mod trainer;
pub mod uncertainty;
pub mod views;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use views::{ViewSet, ViewTransform};
pub use volume::{Case, DatasetSplit, LabelMap, Mode, ProbMap, Shape3, Volume3D};
