//! Source network: graph representation, reference evaluation, activation
//! statistics and the on-disk model format.

mod forward;
mod graph;
mod io;
pub mod stats;

pub use forward::{eval_layer, Activations};
pub use graph::{AnnGraph, LayerKind, LayerNode};
pub use io::ANN_SCHEMA;
pub use stats::{collect_relu_stats, GaussianStats, Granularity, Sample};
