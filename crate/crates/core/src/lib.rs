//! Curiosity-driven discovery of discrete action symbols.
//!
//! A Gaussian effect-prediction model is trained on interactions gathered
//! in a tabletop surrogate world; its binarized encoder outputs become
//! action and object symbols, which are distilled back into executable
//! actions and composed by breadth-first search.

pub mod dataset;
pub mod error;
pub mod explorer;
pub mod harness;
pub mod model;
pub mod planner;
pub mod rng;
pub mod scalar;
pub mod symbols;
pub mod world;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type EffectModelF32 = model::EffectModel<f32>;
pub type EffectModelF64 = model::EffectModel<f64>;
