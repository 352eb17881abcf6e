//! Dense-tensor building blocks and a small two-stage defect detector:
//! deformable convolution, channel/spatial attention, a feature pyramid,
//! RoI Align, detection losses, training, evaluation and dataset I/O.

pub mod autograd;
pub mod cbam;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod roi_align;
pub mod tensor;
pub mod upsample;

pub use error::{Error, Result};
pub use geometry::{iou, BBox};
pub use tensor::Tensor;
