//! Two-stage detector: backbone, optional pyramid neck, region proposals and
//! a RoI classification head.

pub mod anchors;
pub mod config;
pub mod infer;
pub mod matching;
pub mod model;
pub mod nms;
pub mod train;

pub use config::{ModelConfig, Toggles, TrainConfig};
pub use infer::{detect, generate_proposals};
pub use model::Detector;
pub use train::{curve_csv, train, LossBreakdown, LossRecord, TrainOutcome};
