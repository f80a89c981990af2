//! AquaFeat+: feature-level enhancement of degraded underwater images,
//! trained end-to-end against the loss of a downstream vision task rather
//! than an image-quality objective.
//!
//! The pipeline is: fixed white-balance color correction → a shared-weight
//! convolutional encoder applied at full, quarter and eighth resolution →
//! a global/scale attention block fusing the streams → a tanh-bounded
//! residual added back onto the color-corrected input. Every learned branch
//! is zero-initialized, so an untrained model is exactly the identity on
//! top of color correction.
//!
//! The crate ships its own dense rank-4 tensor engine with tape-based
//! reverse-mode differentiation ([`tensor`]), a synthetic underwater data
//! generator ([`synth`]), a toy classification head whose cross-entropy
//! loss drives training ([`head`]), and a command-line interface ([`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod color;
pub mod fusion;
pub mod gradsuite;
pub mod gsam;
pub mod head;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod special_conv;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod ufen;

pub use image_io::ImageRGB;
pub use model::{Model, ModelConfig};
pub use params::Param;
pub use tensor::{Shape, Tape, Tensor, TensorError, Var};
