//! Trains one-layer attention and linear-recurrent sequence models on noisy,
//! partially observed Lorenz dynamics and measures how well their
//! sequence-layer outputs work as delay embeddings of the hidden attractor.

pub mod container;
pub mod dynamics;
pub mod embedmetrics;
pub mod models;
pub mod numerics;
pub mod seed;
pub mod training;


pub use dynamics::{LorenzParams, SimConfig, Trajectory, TrajectoryDataset};
pub use embedmetrics::{EmbeddingSample, MetricConfig, MetricReport};
pub use models::{EmbeddingTrace, ModelKind, ModelParams, ModelSpec};
pub use numerics::{AdamConfig, AdamState, Tensor};
pub use training::{CheckpointRecord, TrainConfig};
