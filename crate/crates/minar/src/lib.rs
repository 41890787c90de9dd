//! Circuit discovery for message-passing networks trained on algorithmic
//! tasks: dataset generation, training with sparsity regularization,
//! neuron-level computation graphs, attribution-patching edge scores, and
//! end-to-end circuit extraction with fidelity metrics.

pub mod attribution;
pub mod autodiff;
pub mod circuits;
pub mod cli;
pub mod compgraph;
pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
