//! Gradient attention balance training for group-fair recognition networks.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod erasure;
pub mod evaluation;
pub mod error;
pub mod gam;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;

pub use autodiff::{GradientBundle, ParamId, Tape, Targets, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
