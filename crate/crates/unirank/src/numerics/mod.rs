//! Tensor arithmetic, reverse-mode differentiation and optimisation.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
