pub mod bench;
pub mod config;
pub mod conv;
pub mod data;
pub mod equicheck;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod network;
pub mod orientpool;
pub mod real;
pub mod rotkernel;
pub mod tensor;
pub mod train;
pub mod vecfield;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor4;
