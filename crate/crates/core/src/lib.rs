//! Monocular-to-stereo conversion: a small reverse-mode autodiff engine, the
//! differentiable selection layer, a classical DIBR pipeline and baselines,
//! the network that predicts per-pixel disparity distributions, and the
//! training, evaluation and output tooling around it.

pub mod data;
pub mod dibr;
pub mod error;
pub mod eval;
pub mod kv;
pub mod network;
pub mod output;
pub mod raster;
pub mod selection;
pub mod tensorcore;
pub mod training;

pub use error::{Error, Result};
pub use raster::{HoleMask, Image, Plane};
pub use tensorcore::{Graph, Mode, Tensor, Var};
