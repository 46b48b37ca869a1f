//! File formats, checkpoints and the command-line driver around `erc-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod error;

pub use error::{Error, Result};
