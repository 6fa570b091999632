//! Lightweight classifier heads over frozen image embeddings for
//! fine-grained, class-imbalanced species classification with a
//! poisonousness-aware cost model.

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
