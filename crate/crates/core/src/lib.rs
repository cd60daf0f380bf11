//! Two-tower gated transformer for classifying multivariate time series, on a small tape-based autograd.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{GtnError, Result};
pub use rng::{Purpose, Rng};
pub use tensor::{Mask, Tensor};
