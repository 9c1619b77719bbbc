pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod exfusion;
pub mod gradcheck;
pub mod moe;
pub mod params;
pub mod tensor;
pub mod testing;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Real, Tensor, Var};
