pub mod analysis;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod report;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
