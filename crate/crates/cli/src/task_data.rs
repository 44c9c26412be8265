//! Task data formats.
//!
//! Classification: `text_a<TAB>label` or `text_a<TAB>text_b<TAB>label`,
//! labels as integers in `0..num_labels`.
//! Span: `context<TAB>question<TAB>char_start<TAB>char_end` with half-open
//! character offsets over the *normalized* context; offsets are widened to
//! basis-token boundaries and converted to fine-token positions here, so
//! the model layer only ever sees token indices.

use std::path::Path;

use ambert_core::finetune::{ClassExample, SpanExample, TaskData};
use ambert_core::tokenizer::{normalize, Tokenizer};

use crate::error::{io_data, CliError, CliResult};

pub fn parse_classification(
    text: &str,
    tokenizer: &Tokenizer<'_>,
    num_labels: usize,
    max_fine: usize,
    max_coarse: usize,
) -> CliResult<TaskData> {
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (text_a, text_b, label_str) = match fields.as_slice() {
            [a, l] => (*a, None, *l),
            [a, b, l] => (*a, Some(*b), *l),
            _ => {
                return Err(CliError::data(format!(
                    "line {line_no}: expected text_a<TAB>[text_b<TAB>]label"
                )))
            }
        };
        let label: usize = label_str.parse().map_err(|_| {
            CliError::data(format!("line {line_no}: bad label {label_str:?}"))
        })?;
        if label >= num_labels {
            return Err(CliError::data(format!(
                "line {line_no}: label {label} outside 0..{num_labels}"
            )));
        }
        let pair = tokenizer
            .encode(text_a, text_b, max_fine, max_coarse)
            .map_err(|e| CliError::data(format!("line {line_no}: {e}")))?;
        examples.push(ClassExample { pair, label });
    }
    if examples.is_empty() {
        return Err(CliError::data("no classification examples found"));
    }
    Ok(TaskData::Classification(examples))
}

pub fn parse_span(
    text: &str,
    tokenizer: &Tokenizer<'_>,
    max_fine: usize,
    max_coarse: usize,
) -> CliResult<TaskData> {
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [context, question, start_str, end_str] = fields.as_slice() else {
            return Err(CliError::data(format!(
                "line {line_no}: expected context<TAB>question<TAB>char_start<TAB>char_end"
            )));
        };
        let char_start: usize = start_str.parse().map_err(|_| {
            CliError::data(format!("line {line_no}: bad char_start {start_str:?}"))
        })?;
        let char_end: usize = end_str.parse().map_err(|_| {
            CliError::data(format!("line {line_no}: bad char_end {end_str:?}"))
        })?;
        let (start, end) = char_span_to_fine(tokenizer, context, char_start, char_end)
            .map_err(|msg| CliError::data(format!("line {line_no}: {msg}")))?;
        // Context is text_a, so its fine tokens start right after [CLS].
        let pair = tokenizer
            .encode(context, Some(question), max_fine, max_coarse)
            .map_err(|e| CliError::data(format!("line {line_no}: {e}")))?;
        let answer_start = start + 1;
        let answer_end = end + 1;
        if answer_end > pair.interior_fine() {
            return Err(CliError::data(format!(
                "line {line_no}: answer span was truncated away (ends at fine position {answer_end}, interior {})",
                pair.interior_fine()
            )));
        }
        examples.push(SpanExample { pair, start: answer_start, end: answer_end });
    }
    if examples.is_empty() {
        return Err(CliError::data("no span examples found"));
    }
    Ok(TaskData::Span(examples))
}

/// Maps a half-open character range over the normalized context onto an
/// inclusive raw fine-token range, widening to basis-token boundaries.
fn char_span_to_fine(
    tokenizer: &Tokenizer<'_>,
    context: &str,
    char_start: usize,
    char_end: usize,
) -> Result<(usize, usize), String> {
    if char_end <= char_start {
        return Err(format!("empty char span {char_start}..{char_end}"));
    }
    let normalized = normalize(context, tokenizer.mode());
    let total_chars = normalized.chars().count();
    if char_end > total_chars {
        return Err(format!(
            "char span {char_start}..{char_end} outside normalized context of {total_chars} chars"
        ));
    }
    let spans = tokenizer.word_spans(context);
    // Character extent of each basis token within the normalized string.
    let joiner_len = match tokenizer.mode() {
        ambert_core::tokenizer::Mode::Subword => 1,
        ambert_core::tokenizer::Mode::Char => 0,
    };
    let mut cursor = 0usize;
    let mut first: Option<usize> = None;
    let mut last: Option<usize> = None;
    for (i, (surface, _, _)) in spans.iter().enumerate() {
        let len = surface.chars().count();
        let word_range = cursor..cursor + len;
        // Overlaps [char_start, char_end)?
        if word_range.start < char_end && char_start < word_range.end {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
        cursor += len + joiner_len;
    }
    match (first, last) {
        (Some(f), Some(l)) => {
            let start_tok = spans[f].1;
            let end_tok = spans[l].2; // exclusive
            Ok((start_tok, end_tok - 1))
        }
        _ => Err(format!("char span {char_start}..{char_end} covers no basis token")),
    }
}

pub fn load_classification(
    path: &Path,
    tokenizer: &Tokenizer<'_>,
    num_labels: usize,
    max_fine: usize,
    max_coarse: usize,
) -> CliResult<TaskData> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_data(&format!("reading {}", path.display()), e))?;
    parse_classification(&text, tokenizer, num_labels, max_fine, max_coarse)
        .map_err(|e| CliError::data(format!("{}: {}", path.display(), e.message)))
}

pub fn load_span(
    path: &Path,
    tokenizer: &Tokenizer<'_>,
    max_fine: usize,
    max_coarse: usize,
) -> CliResult<TaskData> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_data(&format!("reading {}", path.display()), e))?;
    parse_span(&text, tokenizer, max_fine, max_coarse)
        .map_err(|e| CliError::data(format!("{}: {}", path.display(), e.message)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ambert_core::tokenizer::Mode;
    use ambert_core::vocab::{Granularity, Vocabulary};

    fn vocabs() -> (Vocabulary, Vocabulary) {
        let words = ["the", "cat", "sat", "on", "mat", "where"];
        let fine = Vocabulary::from_entries(
            Granularity::Fine,
            words.iter().map(|w| (w.to_string(), 5u64)),
        )
        .unwrap();
        let coarse = Vocabulary::from_entries(
            Granularity::Coarse,
            [("the cat".to_string(), 5u64)]
                .into_iter()
                .chain(words.iter().map(|w| (w.to_string(), 5u64))),
        )
        .unwrap();
        (fine, coarse)
    }

    #[test]
    fn classification_lines_parse_with_and_without_text_b() {
        let (fine, coarse) = vocabs();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let data = parse_classification(
            "the cat\t1\nthe cat\tsat on\t0\n",
            &tok,
            2,
            32,
            32,
        )
        .unwrap();
        assert_eq!(data.len(), 2);
    }

    #[test]
    fn label_outside_range_names_line() {
        let (fine, coarse) = vocabs();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let err = parse_classification("the cat\t1\nthe cat\t7\n", &tok, 2, 32, 32).unwrap_err();
        assert!(err.message.contains("line 2"), "{}", err.message);
    }

    #[test]
    fn char_offsets_map_to_fine_positions() {
        let (fine, coarse) = vocabs();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        // Normalized context: "the cat sat" — chars 4..7 are "cat".
        let data = parse_span("the cat sat\twhere\t4\t7\n", &tok, 32, 32).unwrap();
        let TaskData::Span(examples) = data else { panic!() };
        // "cat" is word 1 → raw fine token 1 → encoded position 2.
        assert_eq!((examples[0].start, examples[0].end), (2, 2));
    }

    #[test]
    fn partial_word_offsets_widen_to_word_bounds() {
        let (fine, coarse) = vocabs();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        // chars 5..10 cut into "cat" and "sat": widened to both words.
        let data = parse_span("the cat sat\twhere\t5\t10\n", &tok, 32, 32).unwrap();
        let TaskData::Span(examples) = data else { panic!() };
        assert_eq!((examples[0].start, examples[0].end), (2, 3));
    }

    #[test]
    fn out_of_range_offsets_rejected() {
        let (fine, coarse) = vocabs();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        assert!(parse_span("the cat\twhere\t4\t99\n", &tok, 32, 32).is_err());
    }
}
