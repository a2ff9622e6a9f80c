pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod longvideo;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod resample;
pub mod train;
pub mod video;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
