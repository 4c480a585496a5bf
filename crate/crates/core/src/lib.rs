pub mod config;
pub mod data_forge;
pub mod diffkit;
pub mod error;
pub mod evalkit;
pub mod lerg_detector;
pub mod locparse;
pub mod scalar;
pub mod seg_net;
pub mod trainer;
pub mod workflow;

pub use error::{CheckpointError, Error, Result};
pub use scalar::Scalar;

pub type SegNet32 = seg_net::SegNet<f32>;
pub type SegNet64 = seg_net::SegNet<f64>;
pub type Detector32 = lerg_detector::Detector<f32>;
pub type Detector64 = lerg_detector::Detector<f64>;
pub type Tensor32 = diffkit::Tensor<f32>;
pub type Tensor64 = diffkit::Tensor<f64>;
