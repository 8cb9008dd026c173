//! Phonotactic language identification for sung audio.
//!
//! A convolutional-recurrent acoustic model trained with CTC turns features
//! into phoneme posteriorgrams; a recurrent classifier (or a linear model
//! over posteriorgram statistics) maps them to a language. The crate covers
//! corpus handling, feature extraction, the layer library, training,
//! song-level inference and evaluation.
//!
//! Networks are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod acoustic;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod selftest;
pub mod stats;
pub mod system;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type AcousticModelF32 = acoustic::AcousticModel<f32>;
pub type AcousticModelF64 = acoustic::AcousticModel<f64>;
pub type LanguageClassifierF32 = classifier::LanguageClassifier<f32>;
pub type LanguageClassifierF64 = classifier::LanguageClassifier<f64>;
pub type SongSystemF32 = system::SongSystem<f32>;
pub type SongSystemF64 = system::SongSystem<f64>;
