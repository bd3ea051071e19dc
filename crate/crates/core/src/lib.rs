//! Multi-view anomaly detection with a product-of-experts clustering VAE.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the production precision.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod latent;
pub mod loss;
pub mod model;
pub mod networks;
pub mod params;
pub mod scalar;
pub mod train;

pub use config::{Ablation, ModelConfig, ViewKind, ViewSpec};
pub use error::{DpoeError, Result};
pub use scalar::Scalar;

pub type Model = model::DpoeModel<f32>;
pub type Model64 = model::DpoeModel<f64>;
pub type Dataset = data::MultiViewDataset<f32>;
pub type Dataset64 = data::MultiViewDataset<f64>;
pub type Checkpoint = checkpoint::CheckpointBundle<f32>;
