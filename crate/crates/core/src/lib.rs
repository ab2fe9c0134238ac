pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{DataError, Error, Result};
pub use scalar::Scalar;
pub mod boxops;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod teacher;
pub mod model;
pub mod optim;
pub mod checkpoint;
pub mod components;
pub mod data;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type ParamSet64 = params::ParamSet<f64>;
