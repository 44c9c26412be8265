//! Corpus ingestion: one document per line, UTF-8, with malformed lines
//! rejected and counted rather than aborting the run.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{io_data, CliResult};

pub struct Corpus {
    pub lines: Vec<String>,
    /// Lines dropped because they were not valid UTF-8.
    pub rejected_lines: u64,
    /// SHA-256 over the raw file bytes, for the reproducibility stanza.
    pub sha256: String,
}

/// Reads a corpus file. Splitting happens at byte level so a single bad
/// line cannot poison its neighbors.
pub fn read_corpus(path: &Path) -> CliResult<Corpus> {
    let bytes =
        fs::read(path).map_err(|e| io_data(&format!("reading corpus {}", path.display()), e))?;
    let sha256 = hex_digest(&bytes);
    let mut lines = Vec::new();
    let mut rejected_lines = 0;
    for raw in bytes.split(|&b| b == b'\n') {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        match std::str::from_utf8(raw) {
            Ok(s) => lines.push(s.to_string()),
            Err(_) => rejected_lines += 1,
        }
    }
    // A trailing newline yields one empty tail entry; drop it.
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(Corpus { lines, rejected_lines, sha256 })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
