pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mccl;
pub mod params;
pub mod ptd;
pub mod tensor;
pub mod trainer;

pub use error::{CarlError, Result};
