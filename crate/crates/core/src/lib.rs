pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flowcore;
pub mod jointnet;
pub mod latent;
pub mod layers;
pub mod model;
pub mod orchestrator;
pub mod pap;
pub mod params;
pub mod rope;
pub mod scalar;
pub mod stream;
pub mod synthworld;
pub mod tensor;
pub mod tokens;
pub mod train;

/// Precision used for training, sampling and streaming.
pub type Scalar = f32;
/// Precision used for gradient checks.
pub type CheckScalar = f64;

pub type Tensor = tensor::Tensor<Scalar>;
pub type Latent = latent::LatentBlock<Scalar>;
pub type Params = params::ParameterSet<Scalar>;
pub type Checkpoint = checkpoint::Checkpoint<Scalar>;
pub type ChunkRecord = container::ChunkRecord<Scalar>;

pub use error::{Error, Result};
