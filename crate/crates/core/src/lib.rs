//! Relation-graph classification for multi-granularity dating.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: the dynasty/period/shape/characteristic relation graph and
//!   its legal assignments.
//! - [`inference`]: partition functions and marginals, factorized and by
//!   enumeration.
//! - [`losses`]: the graph losses, cross-entropy and the focal losses, with
//!   analytic gradients.
//! - [`tensor`]: a small reverse-mode tape for the network heads.
//! - [`model`]: the four-head network.
//! - [`data`]: dataset records, splitting, statistics and synthetic data.
//! - [`train`]: Adam, cosine annealing, early stopping and metrics.

pub mod data;
pub mod graph;
pub mod inference;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use graph::{
    build_graph, enumerate_legal, is_legal, Assignment, GraphError, GraphSchema, GraphSpec, GraphView, NodeId,
    NodeKind, RelationGraph, Scope,
};
pub use inference::{
    factorized_inference, joint_probability, marginal, oracle_inference, partition_function, InferenceError,
    InferenceResult, NodeActivations,
};
pub use losses::{Hyperparams, LossComponents, LossError};
pub use model::{Model, ModelConfig, ModelError, PredictMode};
pub use data::{load_dataset, DataError, Dataset, DingRecord, Split, SynthConfig};
pub use tensor::{Tape, Tensor, TensorError};
pub use train::{evaluate, train, Ablation, Metrics, TrainConfig, TrainError};
