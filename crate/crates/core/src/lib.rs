pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
