//! `tokenize`: print dual-granularity tokenization per input line.
//!
//! Plain output is three lines per input: fine tokens, coarse tokens
//! (internal spaces shown as `_`), and the alignment as space-separated
//! `start:end` fine ranges. `--json` emits one object per input line.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use ambert_core::tokenizer::Tokenizer;
use serde::Serialize;

use crate::commands::{load_vocab_pair, parse_mode};
use crate::error::{io_data, CliResult};

pub struct TokenizeOpts {
    pub fine_vocab: PathBuf,
    pub coarse_vocab: PathBuf,
    pub mode: String,
    pub input: Option<PathBuf>,
    pub json: bool,
}

#[derive(Serialize)]
struct TokenizedLine<'a> {
    fine: &'a [String],
    coarse: &'a [String],
    alignment: Vec<(u32, u32)>,
}

pub fn run(opts: &TokenizeOpts) -> CliResult<()> {
    let mode = parse_mode(&opts.mode)?;
    let (fine, coarse) = load_vocab_pair(&opts.fine_vocab, &opts.coarse_vocab)?;
    let tokenizer = Tokenizer::new(mode, &fine, &coarse);

    let lines: Vec<String> = match &opts.input {
        Some(path) => crate::corpus::read_corpus(path)?.lines,
        None => {
            let stdin = std::io::stdin();
            stdin
                .lock()
                .lines()
                .collect::<Result<_, _>>()
                .map_err(|e| io_data("reading stdin", e))?
        }
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in &lines {
        let fine_tokens = tokenizer.tokenize_fine(line);
        let (coarse_tokens, alignment) = tokenizer.tokenize_coarse(&fine_tokens);
        if opts.json {
            let record = TokenizedLine {
                fine: &fine_tokens,
                coarse: &coarse_tokens,
                alignment: alignment.clone(),
            };
            let json = serde_json::to_string(&record)
                .map_err(|e| crate::error::CliError::data(format!("encoding json: {e}")))?;
            writeln!(out, "{json}").map_err(|e| io_data("writing stdout", e))?;
        } else {
            writeln!(out, "{}", fine_tokens.join(" ")).map_err(|e| io_data("writing stdout", e))?;
            let display: Vec<String> =
                coarse_tokens.iter().map(|t| t.replace(' ', "_")).collect();
            writeln!(out, "{}", display.join(" ")).map_err(|e| io_data("writing stdout", e))?;
            let ranges: Vec<String> =
                alignment.iter().map(|(s, e)| format!("{s}:{e}")).collect();
            writeln!(out, "{}", ranges.join(" ")).map_err(|e| io_data("writing stdout", e))?;
        }
    }
    Ok(())
}
