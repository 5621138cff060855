pub mod backbone;
pub mod cgan;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod sweep;
pub mod tape;
pub mod trainer;

pub use error::{DafosError, Result};
