//! File formats, command line and benchmarks around `videoar-core`.

pub mod cli;
pub mod clock;
pub mod error;
pub mod format;
pub mod parse;
pub mod render;
pub mod report;
pub mod selftest;

pub use error::{Error, Result};
pub use format::{read_latent, write_latent};
pub use parse::parse_scheme;
