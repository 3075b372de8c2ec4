pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod refconv;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
