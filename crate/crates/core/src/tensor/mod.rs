//! Dense matrices, seeded initialization and tape-based reverse-mode gradients.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod matrix;
pub mod rng;

pub use attention::{Blocks, Mask};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use graph::{GradFault, Gradients, Graph, Var};
pub use init::{glorot_init, uniform};
pub use matrix::{softmax_rows, Matrix};
pub use rng::RngState;
