//! Manifold-capacity regularization for generalized category discovery:
//! reverse-mode autodiff, contrastive and MTMC losses, spectral diagnostics,
//! semi-supervised clustering, synthetic data and a training runner.

pub mod error;
pub mod linalg;
pub mod scalar;
pub mod autodiff;
pub mod model;
pub mod losses;
pub mod spectral;
pub mod cluster;
pub mod data;
pub mod runner;

/// Dense f64 matrix used throughout the pipeline.
pub type DenseMatrix = linalg::Matrix<f64>;
/// f64 reverse-mode tape.
pub type Tape = autodiff::Tape<f64>;
