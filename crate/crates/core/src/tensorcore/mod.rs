//! Minimal reverse-mode differentiation: a tape of image-network layers
//! (convolution, transposed convolution, pooling, affine, batch norm,
//! channel softmax, ReLU, dropout, L1 loss) plus a few elementwise helpers.

mod graph;
pub(crate) mod kernels;
mod ops;
mod tensor;

pub(crate) use graph::{Backward, BackwardCtx};
pub use graph::{Graph, Var};
pub use ops::{softmax_channels, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
