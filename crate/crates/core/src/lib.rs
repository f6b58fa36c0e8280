//! Federated learning with feature-allocated model regulation.
//!
//! Networks are regulated into shared lower layers and class-mapped grouped
//! upper layers, so each class's gradient reaches only its own structure
//! group. Federated aggregation then averages shared layers across all
//! nodes and each group only across the nodes that train its classes.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod optim;
pub mod params;
pub mod layers;
pub mod rng;
pub mod psinet;
pub mod model;
pub mod data;
pub mod partition;
pub mod interpret;
pub mod checkpoint;
pub mod federation;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
