//! Volumetric attribution toolkit.
//!
//! A multi-path gated-attention 3-D CNN over normalized volume channels, a
//! from-scratch recorded-graph autodiff core for training and gradient
//! baselines, a layer-wise relevance propagation engine with an
//! absolute-value split rule for multiplicative gates, and a perturbation
//! harness (quantile masks, voxel inversion, rank statistics) evaluated on
//! synthetic phantom volumes with known ground truth.

pub mod attribution;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod ops;
pub mod phantom;
pub mod net;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
