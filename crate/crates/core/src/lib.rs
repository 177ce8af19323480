pub mod classifier;
pub mod config;
pub mod dataset;
pub mod ddim;
pub mod error;
pub mod explain;
pub mod export;
pub mod network;
pub mod objectives;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
