//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations and evaluates them eagerly. Calling
//! [`Graph::grad`] appends the backward pass to the same graph as ordinary
//! nodes, so a gradient can itself be differentiated. This is what lets the
//! meta-learning outer loop differentiate through an inner policy-gradient
//! step.
//!
//! Broadcasting is explicit: apart from [`Graph::add_row`] (row-vector bias),
//! shapes must match exactly or be adapted with [`Graph::broadcast`] and
//! [`Graph::sum_to`].

mod array;
mod backward;
mod check;
mod graph;

pub use array::Array;
pub use check::check_gradient;
pub use graph::{Axis, Graph, NodeId};

pub(crate) use graph::softplus;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("array shape {shape:?} does not hold {len} values")]
    BadArray { shape: Vec<usize>, len: usize },
    #[error("node {node}: graph values must be rank-2, got shape {shape:?}")]
    NotMatrix { node: usize, shape: Vec<usize> },
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {node} is not in the graph")]
    UnknownNode { node: usize },
    #[error("gradient output node {node} must be scalar, has shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("node {node} is not a leaf and cannot be perturbed")]
    NotLeaf { node: usize },
    #[error("finite-difference epsilon {0} outside (0, 1e-2]")]
    BadEpsilon(f64),
}
