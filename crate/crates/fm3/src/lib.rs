//! Runner, file formats and command line for the FM3 pipeline.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
