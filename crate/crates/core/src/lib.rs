pub mod backbone;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod oel;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod scl;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
