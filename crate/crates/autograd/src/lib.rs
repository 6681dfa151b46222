//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Built for small 3D convolutional networks trained on a CPU. Gradients are
//! recorded ops themselves, so second derivatives (gradient penalties,
//! Hessian-vector products) come for free.

mod error;
mod ops;
mod optim;
mod params;
mod scalar;
mod store;
mod tensor;
mod var;

pub use error::{Error, Result};
pub use ops::{ConvSpec, SparseMap};
pub use optim::{Adam, AdamConfig};
pub use params::{kaiming_uniform, uniform, ParamSet};
pub use scalar::{gemm, Scalar};
pub use store::{assign_params, load_params, save_params, MANIFEST};
pub use tensor::Tensor;
pub use var::{grad, grad_with_seed, no_grad, NoGradGuard, Var};
