//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! Every primitive records its inputs, and every backward rule is written in
//! terms of the same primitives. Running [`gradient`] with `create_graph`
//! therefore yields gradients that are themselves graph nodes, which is all
//! that second-order meta-gradients need.

mod backward;
pub mod check;
mod finite_diff;
mod graph;
mod tensor;

use thiserror::Error;

pub use backward::{gradient, GradientMap};
pub use finite_diff::finite_difference_gradient;
pub use graph::{concat, Graph, Var};
pub use tensor::Tensor;

pub(crate) use tensor::order_free_sum;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable {0} is not part of the output's computation record")]
    NotInGraph(usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AdError>;
