//! Minimal numerical substrate: matrices, a small transformer encoder,
//! losses, and an optimizer, all with hand-written gradients.

pub mod adam;
pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use encoder::{Encoder, EncoderConfig, EncoderInput, SoftRow};
pub use layers::{LayerNorm, Linear};
pub use ops::{
    cosine_similarity, cross_entropy, cross_entropy_batch, mean_pool, softmax_with_temperature,
    EmbeddingMatrix, LatentVector,
};
pub use params::Params;
pub use tensor::{Matrix, Scalar};
pub use train::TrainConfig;
