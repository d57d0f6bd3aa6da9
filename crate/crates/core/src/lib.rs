pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod domains;
pub mod episodic;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod memory;
pub mod nets;
pub mod raster;

pub use error::{Error, Result};
