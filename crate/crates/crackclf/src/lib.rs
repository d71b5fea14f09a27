//! File formats, dataset handling and the `crackclf` command line around
//! [`crackclf_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data_io;
mod error;

pub use error::{AppError, AppResult};
