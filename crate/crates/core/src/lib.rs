pub mod autograd;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod easm;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod frame;
pub mod livt;
pub mod model;
pub mod nn;
pub mod resample;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::Tensor;
