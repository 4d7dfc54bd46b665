//! Minimal reverse-mode automatic differentiation, ReLU MLPs, Adam and the
//! weight-file format.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod mlp;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_weights, save_weights, WeightFile};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{forward_mlp, sigmoid, Layer, MlpParams, MlpVars, OutputActivation};
pub use tensor::Tensor;
