pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod model;
pub mod volume;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
