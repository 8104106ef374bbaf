pub mod adapter;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod masking;
pub mod model;
pub mod salience;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SpeftError};
pub use tensor::Tensor;
