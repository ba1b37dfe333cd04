//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use graph::{BatchStats, BinaryOp, BnMode, Gradients, Graph, Var, BN_EPS};
