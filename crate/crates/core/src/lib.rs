pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod reconstruction;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
