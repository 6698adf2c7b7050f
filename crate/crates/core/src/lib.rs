//! Pose-conditioned denoising diffusion for novel view synthesis.
//!
//! A desk-scale, self-contained pipeline that trains a mini-UNet epsilon
//! predictor on procedurally rendered multi-view scenes, machine-checks the
//! degeneracy of single-token cross-attention, and compares three
//! conditioning layouts:
//!
//! - mode A ("legacy"): one token, pooled image embedding concatenated with
//!   the relative pose and linearly projected;
//! - mode B ("revamped"): image patch tokens plus a separately projected
//!   pose token, stacked as a sequence;
//! - mode C ("multi-view"): per-view contexts of several condition views
//!   concatenated along the sequence axis.

pub mod conditioning;
pub mod diagnostics;
pub mod diffusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scenes;
pub mod tensor;

pub use tensor::{Scalar, Tape, Tensor, TensorError, Var};
