pub mod cli;
pub mod config;
pub mod data;
pub mod distributions;
pub mod model;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod objectives;
pub mod priors;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
