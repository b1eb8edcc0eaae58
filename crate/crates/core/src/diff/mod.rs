//! Dense matrices with reverse-mode gradients.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{analytic_gradients, grad_check, grad_check_against, relative_error, GradCheckReport, NOISE_FLOOR};
pub(crate) use graph::argmax;
#[cfg(test)]
pub(crate) use graph::sigmoid;
pub use graph::{Axis, Gradients, Graph, Var};
pub use matrix::Matrix;
