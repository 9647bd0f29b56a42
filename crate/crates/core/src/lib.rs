pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod raster;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
