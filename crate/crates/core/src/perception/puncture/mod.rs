//! Learned puncture detection from short sequences of tip crops.

pub mod detector;
pub mod layers;
pub mod model;
pub mod train;

pub use detector::{crop_at, PunctureDetector, PunctureDetectorConfig};
pub use model::{puncture_forward, puncture_loss, LossParts, ModelShape, ParamLayout, PunctureModel, Sequence, StreamState, Temporal};
pub use train::{evaluate, train, DetectorEvaluation, EvalConfig, PunctureClip, TrainConfig, TrainReport};
