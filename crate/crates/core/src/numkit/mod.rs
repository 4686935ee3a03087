//! Dense numeric kernels, a reverse-mode tape over them, and a
//! finite-difference gradient checker.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use kernels::{
    add, add_row_bias, channel_norm, conv1d, conv1d_ext, gelu, gelu_scalar, layer_norm, linear,
    matmul, matmul_nt, matmul_tn, softmax, transpose,
};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;
