pub mod bench;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod kdb;
pub mod listwise;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod runs;
pub mod theorems;
pub mod trainer;
pub mod tte;
pub mod world;

pub use error::{Error, Result};
