//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Graphs are rebuilt for every forward pass; cached outputs are never
//! mutated after they are recorded.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, ParamCheck, DEFAULT_STEP};
pub use graph::{multilabel_soft_margin, ComputationNode, Gradients, Graph, Var};
pub use tensor::Tensor;
