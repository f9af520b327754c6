//! File formats, training and benchmark drivers and the command-line tool
//! around the `lamformer-core` network.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ltf;
pub mod pgm;
pub mod run;

pub use error::{Error, Result};
