//! Cross-domain few-shot graph anomaly detection.
//!
//! A labeled source graph helps score nodes of a sparsely labeled target
//! graph. Both domains pass through their own MLP into a shared two-layer
//! GraphSAGE encoder. Training combines
//!
//! * DGI-style intra-domain and graph-level inter-domain contrastive losses,
//! * per-domain prompt tokens mixed into the hidden representations,
//! * a hypersphere classification loss around a shared center plus
//!   per-domain offsets,
//!
//! followed by percentile pseudo-labeling and target-only self-training.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the CLI and the gradient
//! checks use.

pub mod checkpoint;
pub mod contrastive;
pub mod data_io;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph = graph::AttributedGraph<f64>;
pub type Model = model::ModelState<f64>;
pub type Bundle = data_io::DomainBundle<f64>;
pub type Pair = data_io::DatasetPair<f64>;
pub type Config = training::TrainConfig;
