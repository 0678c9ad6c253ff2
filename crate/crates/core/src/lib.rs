//! Inference and desk-scale training engine for Mela-D, a lightweight
//! dilated-convolution classifier that labels skin-lesion images as benign or
//! malignant.
//!
//! - [`tensor`]: dense tensors and the forward/backward kernels.
//! - [`model`]: architecture configs, accounting, inference, weight files.
//! - [`data`]: dataset manifests, ingestion and image preprocessing.
//! - [`train`]: Adam training, augmentation, class balancing, synthetic data.
//! - [`bench`]: latency trials and their summary statistics.

pub mod bench;
pub mod data;
pub mod label;
pub mod model;
pub mod tensor;
pub mod train;

pub use label::Label;
pub use model::{forward, ArchitectureConfig, Prediction, WeightBundle};
pub use tensor::{ExecMode, Tensor};
