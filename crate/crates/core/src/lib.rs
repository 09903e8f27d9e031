//! Camera-radar fusion segmentation engine.
//!
//! Three-stage pipeline over a synthetic water-scene corpus:
//!
//! 1. **Fusion** — a small convolutional image pyramid and a shared per-point
//!    radar encoder, fused per level by cross-attention (image features as
//!    queries, radar features as keys/values, residual add), decoded to the
//!    initial mask stack; a point classifier predicts per-point classes.
//! 2. **Pseudo-masks** — projected radar points prompt an instance masker;
//!    per-prompt binary masks are class-labeled from the point classifier,
//!    rasterized, and denoised against the stage-1 background/water channels.
//! 3. **Inpainting** — the denoised masks drive iterative mask-conditioned
//!    inpainting; original and inpainted images feed two encoders whose
//!    per-level features are fused (addition, gated, or concatenation) and
//!    decoded to the final masks.
//!
//! All math is generic over the [`Scalar`] type; `f64` is the training
//! default. Concrete aliases live at the crate root.

pub mod error;
pub mod scalar;

pub mod gradcheck;
pub mod numerics;

pub mod checkpoint;
pub mod fusion;
pub mod image;
pub mod inpaint;
pub mod losses;
pub mod mask_ops;
pub mod optim;
pub mod pipeline;
pub mod prompt_masker;
pub mod protocol;
pub mod radar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used by training and the gradient checks.
pub type Tensor64 = numerics::Tensor<f64>;
/// Single-precision tensor for lighter inference paths.
pub type Tensor32 = numerics::Tensor<f32>;
/// Default-precision tape.
pub type Tape64 = numerics::Tape<f64>;
/// Default-precision mask stack.
pub type MaskStack64 = mask_ops::MaskStack<f64>;
/// Default-precision image.
pub type Image64 = image::Image<f64>;
/// Default-precision scene.
pub type Scene64 = synth::Scene<f64>;
