//! IO companion to `ambert-core`: corpus ingestion, the vocabulary TSV and
//! checkpoint formats, run configuration, task data parsing, and the
//! subcommand implementations behind the `ambert` binary.

pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod error;
pub mod runconfig;
pub mod task_data;
pub mod vocab_io;

pub use error::{CliError, ExitCode};
