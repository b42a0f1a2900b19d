//! Library surface of the command-line interface: configuration
//! resolution, dataset file I/O, report emission and the subcommand
//! implementations. The binary in `main.rs` is a thin argument-parsing
//! wrapper over these.

pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod report;
