//! File formats, dataset loading, reports and the command-line driver around
//! `calm-core`.

pub mod audio;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod manifest;
pub mod report;

pub use error::{CalmError, Result};
