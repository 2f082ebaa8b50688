//! Conditional VAE-GAN that synthesizes a CT slice at a fixed anatomical level
//! from a slice taken anywhere nearby, plus the phantom data, target selection,
//! metrics and longitudinal analysis around it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod ablation;
pub mod checkpoint;
pub mod error;
pub mod harmonize;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod scalar;
pub mod seeding;
pub mod spline;
pub mod stats;
pub mod targetsel;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImageF32 = image::Image<f32>;
pub type ImageF64 = image::Image<f64>;
pub type SliceImageF32 = image::SliceImage<f32>;
pub type SliceImageF64 = image::SliceImage<f64>;
pub type VolumeF32 = volume::Volume<f32>;
pub type VolumeF64 = volume::Volume<f64>;
pub type SliceGenF32 = model::SliceGen<f32>;
pub type SliceGenF64 = model::SliceGen<f64>;
pub type TrainingSetF32 = trainer::TrainingSet<f32>;
pub type CohortF32 = phantom::Cohort<f32>;
