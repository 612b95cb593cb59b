//! Dense matrices with a tape-based reverse-mode differentiator.

mod gradcheck;
mod graph;
mod mat;
pub mod rng;

pub use gradcheck::{grad_check, grad_check_many, relative_error, REL_ERR_FLOOR};
pub use graph::{gelu, sigmoid, softplus, Graph, Unary, Var};
pub use mat::{dot, Mat};
pub use rng::{seeded, Rng};
