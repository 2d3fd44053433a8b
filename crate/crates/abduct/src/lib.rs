//! File formats, language-model clients, run configuration and the
//! pipeline stages behind the `abduct` command line.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod llm;
pub mod pipeline;
pub mod sample_io;
pub mod tensor_io;

pub use error::{IoError, Result};
