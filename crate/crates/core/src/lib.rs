pub mod cli;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod patching;
pub mod persistence;
pub mod rng;
pub mod scoring;
pub mod shiftgen;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
