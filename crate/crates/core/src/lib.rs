//! Image forgery localization library.
//!
//! The model is a two-stream segmentation network: one encoder stream reads
//! the RGB image, the other reads a fixed high-pass noise-residual transform
//! of the same image. The deepest feature maps of the two streams are fused
//! channel-wise, passed through an atrous spatial pyramid pooling block,
//! upsampled, and fed to a segmentation head (per-pixel tamper logits) and,
//! during training, a projection head whose output drives a per-image
//! patch-contrastive loss that pushes tampered and untampered embeddings
//! apart.
//!
//! The crate is self-contained: tensors are plain `f64` buffers and every
//! layer implements its own forward and backward pass, so training is fully
//! deterministic on CPU and gradients can be validated against finite
//! differences at double precision.

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod selftest;
pub mod srm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
