//! Deterministic simulator for personalized federated learning.
//!
//! A split conv/dense classifier is trained over synthetic surveillance-style
//! chunk data with four strategies: FedAvg, FedPer (base layers aggregated,
//! head kept on each client), Per-FedAvg (MAML-style meta-gradient) and
//! FedMeta-Per (meta-learned base, locally trained head).

pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod nn;
pub mod seed;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, ElementType, Tensor};
