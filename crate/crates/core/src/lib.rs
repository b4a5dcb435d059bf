pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod classifier;
pub mod codebook;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod sampler;
pub mod selftest;
pub mod trainer;

pub use error::{FvnError, Result};
