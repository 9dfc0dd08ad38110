//! Small CPU tensor library with a reverse-mode tape, sized for
//! desk-scale convolutional models.

pub mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, NormStats, Var};
pub use optim::Adam;
pub use params::{kaiming_normal, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
