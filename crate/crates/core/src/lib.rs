//! Segmentation by conditional denoising diffusion.
//!
//! A conditional denoising-diffusion model over segmentation label maps: a
//! windowed-attention encoder sees the noisy label together with the image, a
//! second encoder sees the image alone, and a UNet decoder followed by a
//! reverse-boundary attention cascade predicts the injected noise. Training
//! targets can be softened with distance-aware label smoothing, and the
//! image encoder can be pretrained with three self-supervised pretext tasks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffusion;
pub mod error;
pub mod knls;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod rba;
pub mod ssl;
pub mod train;
pub mod util;

pub use error::{DtsError, Result};
