//! Self-contained camouflaged-object-detection library: an f64 tape autodiff
//! core, the convolution/attention blocks it trains, boundary-weighted
//! losses, the standard binary-segmentation metric suite, synthetic data and
//! a CLI (`glco`) for desk-scale experiments.

pub mod blocks;
pub mod config;
pub mod loss;
pub mod model;
pub mod error;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;
pub mod verify;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use kernels::ConvSpec;
pub use tensor::Tensor;
