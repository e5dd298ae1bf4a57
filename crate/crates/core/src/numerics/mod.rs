//! Dense matrix engine: eager kernels, a reverse-mode tape over the same op
//! set, and a finite-difference oracle for checking the tape.

mod gradcheck;
mod matrix;
mod ops;
mod tape;

pub use gradcheck::{check_gradients, relative_error, GradCheck, FD_STEP, REL_FLOOR};
pub use matrix::Matrix;
pub use ops::{
    cross_attention, cross_entropy, finite_diff, layer_norm, matmul, matmul_t,
    multi_head_cross_attention, softmax_rows, softmax_rows_masked, t_matmul, LinearMap,
    MultiHeadParams, LN_EPS,
};
pub use tape::{Gradients, LinearNodes, MultiHeadNodes, NodeId, Tape};
