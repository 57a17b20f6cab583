pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod frontend;
pub mod io;
pub mod nas;
pub mod nn;
pub mod pareto;
pub mod quant;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
