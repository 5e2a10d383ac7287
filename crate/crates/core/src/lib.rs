//! Point cloud upsampling with normal estimation.
//!
//! The crate turns an `n`-point cloud with normals into an `up_ratio * n`
//! point cloud with normals. It contains the spatial kernels ([`geometry`]),
//! a small reverse-mode tape ([`autodiff`]), the compound loss suite
//! ([`losses`]), the feature-embedding/reshaping network ([`network`]),
//! Adam training ([`trainer`]), patch-based inference ([`inference`]) and
//! evaluation metrics ([`metrics`]).

pub mod assignment;
pub mod autodiff;
pub mod checkpoint;
pub mod cloud;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use cloud::{PointCloud, Vec3};
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use network::{NetConfig, Network, NetworkParams};
pub use trainer::TrainConfig;
