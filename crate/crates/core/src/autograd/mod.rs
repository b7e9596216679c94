//! Reverse-mode differentiation over a static graph of coarse tensor ops,
//! and a central-difference checker for it.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Node, NodeId, Op};
