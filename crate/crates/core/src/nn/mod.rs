//! Per-view segmentation backbone, optimizer and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod optim;

pub use model::{build_model, DropoutMasks, ForwardCache, SegModelConfig, Segmenter, ViewModel};
pub use ops::Kernel3;
pub use optim::Sgd;
