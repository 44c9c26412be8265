//! `build-vocab`: induce a fine vocabulary or a coarse phrase lexicon from
//! a line-per-document corpus.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ambert_core::tokenizer::{basis_tokens, normalize, Mode};
use ambert_core::vocab::{
    build_fine_vocab, build_phrase_lexicon, count_ngrams, FineVocabMode, LexiconCriteria,
};

use crate::commands::{ensure_out_dir, parse_mode, Stanza};
use crate::corpus::read_corpus;
use crate::error::{CliError, CliResult};
use crate::vocab_io::save_vocab;

pub struct BuildVocabOpts {
    pub corpus: PathBuf,
    pub granularity: String,
    pub output: PathBuf,
    pub mode: String,
    pub target_size: usize,
    pub min_freq: u64,
    pub min_dependence: f64,
    pub max_ngram: usize,
    pub seed: u64,
}

pub fn run(opts: &BuildVocabOpts) -> CliResult<()> {
    let mode = parse_mode(&opts.mode)?;
    let corpus = read_corpus(&opts.corpus)?;
    if corpus.rejected_lines > 0 {
        eprintln!("rejected {} malformed line(s)", corpus.rejected_lines);
    }
    let docs: Vec<Vec<String>> = corpus
        .lines
        .iter()
        .map(|line| basis_tokens(&normalize(line, mode), mode))
        .collect();

    let vocab = match opts.granularity.as_str() {
        "fine" => {
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for doc in &docs {
                for token in doc {
                    *counts.entry(token.clone()).or_insert(0) += 1;
                }
            }
            let fine_mode = match mode {
                Mode::Subword => FineVocabMode::Subword,
                Mode::Char => FineVocabMode::Char,
            };
            build_fine_vocab(counts.into_iter(), fine_mode, opts.target_size)
                .map_err(|e| CliError::data(e.to_string()))?
        }
        "coarse" => {
            let criteria = LexiconCriteria {
                min_frequency: opts.min_freq,
                min_dependence: opts.min_dependence,
                max_ngram_order: opts.max_ngram,
            };
            let table = count_ngrams(docs.iter().cloned(), criteria.max_ngram_order);
            build_phrase_lexicon(&table, &criteria, mode.joiner())
                .map_err(|e| CliError::data(e.to_string()))?
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown granularity {other:?} (fine|coarse)"
            )))
        }
    };

    if let Some(dir) = opts.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_out_dir(dir)?;
    }
    save_vocab(&vocab, &opts.output)?;
    let mut stanza = Stanza::new("build-vocab", opts.seed);
    stanza.push("granularity", opts.granularity.clone());
    stanza.push("corpus_sha256", corpus.sha256.clone());
    stanza.push("rejected_lines", corpus.rejected_lines.to_string());
    stanza.write_to(&opts.output.with_extension("meta"))?;
    println!(
        "wrote {} entries ({}) to {}",
        vocab.len(),
        opts.granularity,
        opts.output.display()
    );
    Ok(())
}
