//! Reverse-mode differentiation, Adam and a finite-difference oracle.

pub mod adam;
pub mod fdiff;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use fdiff::{finite_difference_gradient, max_relative_error};
pub use graph::{softmax, CandidateRow, Graph, Var};
pub use tensor::{Module, Tensor};
