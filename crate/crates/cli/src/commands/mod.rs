//! Subcommand implementations. Each writes a reproducibility stanza
//! (`run.meta`) into its output directory: command, version, seed, and
//! content digests of the inputs that determine the result.

pub mod analyze;
pub mod build_vocab;
pub mod eval;
pub mod finetune;
pub mod pretrain;
pub mod tokenize;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ambert_core::tokenizer::Mode;
use ambert_core::vocab::{Granularity, Vocabulary};

use crate::corpus::hex_digest;
use crate::error::{io_data, CliError, CliResult};
use crate::vocab_io::load_vocab;

pub fn parse_mode(s: &str) -> CliResult<Mode> {
    match s {
        "subword" => Ok(Mode::Subword),
        "char" => Ok(Mode::Char),
        other => Err(CliError::usage(format!("unknown mode {other:?} (subword|char)"))),
    }
}

pub fn load_vocab_pair(
    fine_path: &Path,
    coarse_path: &Path,
) -> CliResult<(Vocabulary, Vocabulary)> {
    let fine = load_vocab(fine_path, Granularity::Fine)?;
    let coarse = load_vocab(coarse_path, Granularity::Coarse)?;
    Ok((fine, coarse))
}

/// Key/digest pairs recorded alongside every producing run.
pub struct Stanza {
    lines: Vec<(String, String)>,
}

impl Stanza {
    pub fn new(command: &str, seed: u64) -> Self {
        let mut s = Stanza { lines: Vec::new() };
        s.push("command", command);
        s.push("version", env!("CARGO_PKG_VERSION"));
        s.push("seed", seed.to_string());
        s
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.lines.push((key.to_string(), value.into()));
    }

    pub fn push_digest(&mut self, key: &str, bytes: &[u8]) {
        self.push(key, hex_digest(bytes));
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        self.write_to(&out_dir.join("run.meta"))
    }

    pub fn write_to(&self, path: &Path) -> CliResult<()> {
        let mut text = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(text, "{k} {v}");
        }
        fs::write(path, text).map_err(|e| io_data("writing reproducibility stanza", e))
    }
}

pub fn ensure_out_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| io_data(&format!("creating output directory {}", path.display()), e))
}

/// Single-line rendering for the machine-parseable error contract.
pub fn one_line(msg: &str) -> String {
    msg.replace('\n', " | ")
}
