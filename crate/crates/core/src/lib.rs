#![no_std]
extern crate alloc;

pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod hypernet;
pub mod multitask;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
