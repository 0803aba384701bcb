//! Sparse variational, deep and distributional deep Gaussian processes.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this module fix the element type to `f64`, which is what
//! every experiment uses.

pub mod autodiff;
pub mod data;
pub mod deep;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gaussmath;
pub mod kernels;
pub mod likelihood;
pub mod linalg;
pub mod moments;
pub mod rng;
pub mod scalar;
pub mod svgp;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type DeepModel = deep::DeepModel<f64>;
pub type VariationalLayer = svgp::VariationalLayer<f64>;
pub type KernelParams = kernels::KernelParams<f64>;
pub type Likelihood = likelihood::Likelihood<f64>;
pub type Targets = likelihood::Targets<f64>;
pub type Dataset = data::Dataset<f64>;
pub type Prepared = data::Prepared<f64>;
pub type LayerOutput = svgp::LayerOutput<f64>;
pub type ExactGp = moments::ExactGp<f64>;
