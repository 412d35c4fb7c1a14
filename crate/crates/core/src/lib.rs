//! Asymmetric, uncertainty-aware GAN for unpaired adverse-weather→normal
//! image translation: networks, path wiring, losses, data pipeline,
//! training engine and desk-scale evaluation metrics.
//!
//! Everything numeric is generic over [`tensor::Element`] (`f32`/`f64`) and
//! runs on a small hand-rolled reverse-mode autodiff engine over `ndarray`,
//! chosen so training is single-threaded, dependency-light and bitwise
//! reproducible for a fixed seed.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod paths;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::{seed_all, Seeder, TrainConfig};
pub use error::{Error, Result};
pub use types::{Domain, FeatureMap, ImageBatch, UncertaintyMap};
