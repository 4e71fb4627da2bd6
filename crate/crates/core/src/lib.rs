//! Saliency-guided contrastive image-quality assessment at desk scale: a
//! tiny from-scratch vision transformer, attention-derived saliency crops,
//! an InfoNCE objective with intra- and inter-image negatives, an EMA
//! teacher-student loop, and the surrounding data/metrics/training plumbing.
//! Everything is generic over the float type; the aliases below fix the two
//! supported precisions.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mutual;
pub mod optim;
pub mod rng;
pub mod saliency;
pub mod sampling;
pub mod scalar;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelStateF32 = model::ModelState<f32>;
pub type ModelStateF64 = model::ModelState<f64>;
pub type ImageF32 = data::Image<f32>;
pub type ImageF64 = data::Image<f64>;
pub type EmbeddingBatchF32 = losses::EmbeddingBatch<f32>;
pub type EmbeddingBatchF64 = losses::EmbeddingBatch<f64>;
pub type CropBatchF32 = sampling::CropBatch<f32>;
pub type CropBatchF64 = sampling::CropBatch<f64>;
