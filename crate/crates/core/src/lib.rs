pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
