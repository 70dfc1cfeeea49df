//! A self-contained implementation of a window-attention U-shaped image
//! restoration network, including the dense-tensor autograd core it trains
//! with, a desk-scale training/evaluation pipeline, and an analytic
//! parameter/MAC accountant.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors plus reverse-mode automatic differentiation
//! - [`windowing`]: window partition/reverse, cyclic shifts, attention masks,
//!   relative-position indexing
//! - [`lewin`]: the locally-enhanced window transformer block
//! - [`model`]: the full encoder/decoder network
//! - [`train`]: Charbonnier loss, AdamW, schedules, and the training loop
//! - [`metrics`]: PSNR/SSIM, color conversion, tiled inference
//! - [`accounting`]: closed-form parameter and MAC counting
//! - [`cli`]: the `uformer` command-line surface

pub mod accounting;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod lewin;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runconfig;
pub mod scalar;
pub mod tensor;
pub mod testsupport;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
