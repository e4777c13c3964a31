pub mod classifiers;
pub mod corpus;
pub mod decoder;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod latent;
pub mod masker;
pub mod nn;
pub mod pipeline;
pub mod stats;

pub use error::{Error, Result};
