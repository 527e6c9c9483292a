pub mod abc;
pub mod auxiliary;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fbp;
pub mod models;
pub mod optim;
pub mod particle;
pub mod rng;
pub mod scoring;
pub mod stats;

pub use error::{Error, Result};
pub use rng::RngStream;
