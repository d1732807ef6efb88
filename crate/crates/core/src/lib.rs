//! Self-supervised cross-modal super-resolution by mutual modulation.
//!
//! A low-resolution source image (depth, elevation, thermal) is upsampled
//! with the help of a high-resolution guide image from another modality. A
//! small network is trained from scratch on the single input pair with a
//! cycle-consistency loss: the super-resolved output, average-pooled back to
//! the source resolution, must reproduce the source.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod modulation;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use network::{ModelConfig, ModelParams, Variant};
pub use tensor::{DType, Scalar, Tensor};
