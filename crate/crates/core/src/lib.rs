pub mod backbone;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod init;
pub mod loss;
pub mod mfaf;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
