//! Vocabulary file format: UTF-8 TSV, one `token<TAB>id<TAB>count` entry
//! per line, LF endings, specials first, no header. Phrase tokens keep
//! their internal spaces; the tab separator disambiguates.

use std::fs;
use std::path::Path;

use ambert_core::vocab::{Granularity, VocabEntry, Vocabulary, NUM_SPECIALS, SPECIAL_TOKENS};

use crate::error::{io_data, CliError, CliResult};

/// Serializes a vocabulary to its TSV byte form. Deterministic: the same
/// vocabulary always produces the same bytes.
pub fn to_tsv(vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (id, entry) in vocab.entries().iter().enumerate() {
        out.push_str(&entry.token);
        out.push('\t');
        out.push_str(&id.to_string());
        out.push('\t');
        out.push_str(&entry.count.to_string());
        out.push('\n');
    }
    out
}

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> CliResult<()> {
    for entry in vocab.entries() {
        if entry.token.contains('\t') || entry.token.contains('\n') {
            return Err(CliError::data(format!(
                "token {:?} contains a separator character",
                entry.token
            )));
        }
    }
    fs::write(path, to_tsv(vocab))
        .map_err(|e| io_data(&format!("writing vocabulary {}", path.display()), e))
}

/// Parses TSV text into a vocabulary, validating density, ordering, and
/// the special-token block. Errors carry 1-based line numbers.
pub fn parse_tsv(text: &str, granularity: Granularity) -> CliResult<Vocabulary> {
    let mut entries: Vec<VocabEntry> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (token, id_str, count_str) = match (parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(i), Some(c)) if parts.next().is_none() => (t, i, c),
            _ => {
                return Err(CliError::data(format!(
                    "line {line_no}: expected token<TAB>id<TAB>count"
                )))
            }
        };
        let id: usize = id_str
            .parse()
            .map_err(|_| CliError::data(format!("line {line_no}: bad id {id_str:?}")))?;
        let count: u64 = count_str
            .parse()
            .map_err(|_| CliError::data(format!("line {line_no}: bad count {count_str:?}")))?;
        if id != entries.len() {
            return Err(CliError::data(format!(
                "line {line_no}: id {id} breaks dense ordering (expected {})",
                entries.len()
            )));
        }
        if entries.iter().any(|e| e.token == token) {
            return Err(CliError::data(format!("line {line_no}: duplicate token {token:?}")));
        }
        entries.push(VocabEntry { token: token.to_string(), count });
    }
    for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
        if entries.get(i).map(|e| e.token.as_str()) != Some(*special) {
            return Err(CliError::data(format!(
                "missing special token {special} at id {i}"
            )));
        }
    }
    let _ = NUM_SPECIALS;
    Vocabulary::from_raw_entries(granularity, entries)
        .map_err(|e| CliError::data(format!("invalid vocabulary: {e}")))
}

pub fn load_vocab(path: &Path, granularity: Granularity) -> CliResult<Vocabulary> {
    let text = fs::read_to_string(path)
        .map_err(|e| io_data(&format!("reading vocabulary {}", path.display()), e))?;
    parse_tsv(&text, granularity)
        .map_err(|e| CliError::data(format!("{}: {}", path.display(), e.message)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_vocab() -> Vocabulary {
        Vocabulary::from_entries(
            Granularity::Coarse,
            [("new york".to_string(), 2u64), ("new".to_string(), 2), ("york".to_string(), 2)],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let v = demo_vocab();
        let text = to_tsv(&v);
        let reloaded = parse_tsv(&text, Granularity::Coarse).unwrap();
        assert_eq!(v, reloaded);
        // And byte-stable.
        assert_eq!(to_tsv(&reloaded), text);
    }

    #[test]
    fn phrase_tokens_keep_internal_spaces() {
        let text = to_tsv(&demo_vocab());
        assert!(text.contains("new york\t5\t2\n"));
    }

    #[test]
    fn duplicate_id_reports_line_number() {
        let text = "[PAD]\t0\t0\n[UNK]\t1\t0\n[CLS]\t2\t0\n[SEP]\t3\t0\n[MASK]\t4\t0\nx\t5\t1\ny\t5\t1\n";
        let err = parse_tsv(text, Granularity::Fine).unwrap_err();
        assert!(err.message.contains("line 7"), "{}", err.message);
    }

    #[test]
    fn duplicate_token_reports_line_number() {
        let text = "[PAD]\t0\t0\n[UNK]\t1\t0\n[CLS]\t2\t0\n[SEP]\t3\t0\n[MASK]\t4\t0\nx\t5\t1\nx\t6\t1\n";
        let err = parse_tsv(text, Granularity::Fine).unwrap_err();
        assert!(err.message.contains("line 7") && err.message.contains("duplicate"));
    }

    #[test]
    fn missing_special_is_named() {
        let text = "[PAD]\t0\t0\n[UNK]\t1\t0\n[CLS]\t2\t0\n[SEP]\t3\t0\nx\t4\t1\n";
        let err = parse_tsv(text, Granularity::Fine).unwrap_err();
        assert!(err.message.contains("[MASK]"), "{}", err.message);
    }
}
