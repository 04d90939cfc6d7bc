//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation returns a fresh, immutable [`Tensor`]. When any input
//! requires a gradient, the result carries a backward record pointing at its
//! parents, so the records form a DAG rooted at whatever scalar is passed to
//! [`Tensor::backward`]. Gradients accumulate only into leaves created with
//! `requires_grad`.
//!
//! ```
//! use patchsum_tensor::Tensor;
//!
//! let a = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
//! let b = Tensor::constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
//! let loss = a.matmul(&b).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 1.0, 1.0]);
//! ```

mod error;
pub mod gradcheck;
mod nn;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use tensor::Tensor;

/// Names of every differentiable operation exposed by this crate.
///
/// The gradient-check suite iterates this list so a newly added operation
/// without a check shows up as a failure.
pub fn fused_ops() -> &'static [&'static str] {
    &[
        "matmul",
        "matmul_nt",
        "transpose",
        "reshape",
        "add",
        "sub",
        "mul",
        "scale",
        "add_scalar",
        "add_row",
        "mul_scalar_tensor",
        "gelu",
        "sigmoid",
        "softmax_rows",
        "softmax_rows_masked",
        "layer_norm",
        "embedding",
        "concat_cols",
        "concat_rows",
        "slice_cols",
        "gather_rows",
        "gather_elements",
        "sum",
        "mean",
        "normalize_sum",
        "l2_normalize_rows",
        "minmax_normalize",
        "cross_entropy_rows",
        "binary_cross_entropy",
    ]
}
