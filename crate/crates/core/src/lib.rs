pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod gaze;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{no_grad, Conv2dSpec, DType, Real, Tensor};
