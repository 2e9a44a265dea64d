//! Complex-valued speech enhancement with complex convolutional block attention.

pub mod app;
pub mod autograd;
pub mod ccbam;
pub mod ctensor;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod models;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
