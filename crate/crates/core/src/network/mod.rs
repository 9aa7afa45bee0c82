//! The noise-prediction network and its building blocks.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod model;
pub mod swin;
pub mod time;
pub mod window;

pub use config::ModelConfig;
pub use decoder::DecoderOutput;
pub use model::DtsModel;
pub use swin::{fuse, FeaturePyramid};
