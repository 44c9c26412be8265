//! Dual-granularity tokenization with fine↔coarse alignment.
//!
//! Every text yields two token sequences: fine-grained (greedy
//! longest-match subword pieces per word, or single characters) and
//! coarse-grained (left-to-right longest lexicon match over the basis
//! tokens). Coarse tokens nest over fine tokens by construction — each
//! coarse token covers a contiguous half-open range of fine positions,
//! recorded in [`TokenSeqPair::alignment`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use unicode_normalization::UnicodeNormalization;

use crate::vocab::{Vocabulary, CLS_ID, NUM_SPECIALS, SEP_ID};

/// Text mode. Decides normalization, the basis unit, and how coarse token
/// surfaces join.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// NFKC + lowercase; basis tokens are whitespace words; fine tokens are
    /// greedy longest-match subword pieces (`##` continuations).
    Subword,
    /// NFKC with whitespace removed; basis tokens are characters; fine
    /// tokens are single characters.
    Char,
}

impl Mode {
    /// Separator between basis tokens inside a coarse surface form.
    pub fn joiner(self) -> &'static str {
        match self {
            Mode::Subword => " ",
            Mode::Char => "",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Subword => write!(f, "subword"),
            Mode::Char => write!(f, "char"),
        }
    }
}

/// Normalizes raw text for `mode`: NFKC, then lowercasing with whitespace
/// collapsed to single spaces (subword) or whitespace removal (char).
pub fn normalize(text: &str, mode: Mode) -> String {
    let nfkc: String = text.nfkc().collect();
    match mode {
        Mode::Subword => {
            let lower = nfkc.to_lowercase();
            let words: Vec<&str> = lower.split_whitespace().collect();
            words.join(" ")
        }
        Mode::Char => nfkc.chars().filter(|c| !c.is_whitespace()).collect(),
    }
}

/// Splits normalized text into basis tokens (words or characters).
pub fn basis_tokens(normalized: &str, mode: Mode) -> Vec<String> {
    match mode {
        Mode::Subword => normalized.split_whitespace().map(|w| w.to_string()).collect(),
        Mode::Char => normalized.chars().map(|c| c.to_string()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizeError {
    /// A maximum length cannot hold `[CLS]`, content, and `[SEP]`.
    MaxLenTooSmall { stream: &'static str, got: usize },
    /// Vocabulary passed for the wrong granularity.
    WrongGranularity { expected: &'static str },
}

impl fmt::Display for TokenizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizeError::MaxLenTooSmall { stream, got } => {
                write!(f, "max {stream} length {got} is below the minimum of 3")
            }
            TokenizeError::WrongGranularity { expected } => {
                write!(f, "vocabulary granularity mismatch: expected {expected}")
            }
        }
    }
}

impl core::error::Error for TokenizeError {}

/// One basis token with its fine-grained pieces.
#[derive(Clone, Debug)]
struct BasisItem {
    surface: String,
    pieces: Vec<String>,
}

/// A coarse token over raw (un-encoded) fine positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoarseToken {
    /// Surface form, e.g. `"new york"` or a single word/character.
    pub surface: String,
    /// Covered raw fine-token range, half-open.
    pub fine_start: usize,
    pub fine_end: usize,
}

/// Aligned fine and coarse id sequences for one input.
///
/// Both streams carry `[CLS]` first and `[SEP]` last (sentence pairs get an
/// additional `[SEP]` between the segments, present in both streams).
/// `alignment` has one entry per interior coarse position `1..=n`, in
/// order; the half-open fine ranges tile the fine interior exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeqPair {
    pub fine_ids: Vec<u32>,
    pub coarse_ids: Vec<u32>,
    pub alignment: Vec<(u32, u32)>,
    pub fine_segments: Vec<u8>,
    pub coarse_segments: Vec<u8>,
}

impl TokenSeqPair {
    pub fn fine_len(&self) -> usize {
        self.fine_ids.len()
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse_ids.len()
    }

    /// Number of interior (non-`[CLS]`, non-final-`[SEP]`) coarse tokens.
    pub fn interior_coarse(&self) -> usize {
        self.coarse_ids.len() - 2
    }

    pub fn interior_fine(&self) -> usize {
        self.fine_ids.len() - 2
    }

    /// The coarse stream position whose alignment range covers interior
    /// fine position `fine_pos`. Total over `1..=interior_fine()`.
    pub fn cover(&self, fine_pos: usize) -> Option<usize> {
        let p = fine_pos as u32;
        self.alignment
            .iter()
            .position(|&(s, e)| s <= p && p < e)
            .map(|j| j + 1)
    }

    /// Checks every structural invariant; used heavily by the test suites.
    pub fn validate(&self) -> Result<(), String> {
        let fl = self.fine_ids.len();
        let cl = self.coarse_ids.len();
        if fl < 2 || cl < 2 {
            return Err("stream shorter than [CLS]+[SEP]".to_string());
        }
        if self.fine_ids[0] != CLS_ID || self.coarse_ids[0] != CLS_ID {
            return Err("missing leading [CLS]".to_string());
        }
        if self.fine_ids[fl - 1] != SEP_ID || self.coarse_ids[cl - 1] != SEP_ID {
            return Err("missing trailing [SEP]".to_string());
        }
        if self.fine_segments.len() != fl || self.coarse_segments.len() != cl {
            return Err("segment id length mismatch".to_string());
        }
        if self.alignment.len() != cl - 2 {
            return Err(alloc::format!(
                "alignment has {} entries for {} interior coarse tokens",
                self.alignment.len(),
                cl - 2
            ));
        }
        let mut expected_start = 1u32;
        for &(s, e) in &self.alignment {
            if s != expected_start {
                return Err(alloc::format!("alignment gap: expected start {expected_start}, got {s}"));
            }
            if e <= s {
                return Err(alloc::format!("empty alignment range {s}:{e}"));
            }
            expected_start = e;
        }
        if expected_start != (fl - 1) as u32 {
            return Err(alloc::format!(
                "alignment tiles up to {expected_start}, fine interior ends at {}",
                fl - 1
            ));
        }
        Ok(())
    }
}

/// Dual-granularity tokenizer over a fine vocabulary and a coarse lexicon.
pub struct Tokenizer<'a> {
    mode: Mode,
    fine: &'a Vocabulary,
    coarse: &'a Vocabulary,
    /// Longest lexicon entry, in basis tokens.
    max_phrase: usize,
}

impl<'a> Tokenizer<'a> {
    pub fn new(mode: Mode, fine: &'a Vocabulary, coarse: &'a Vocabulary) -> Self {
        let max_phrase = coarse
            .entries()
            .iter()
            .skip(NUM_SPECIALS)
            .map(|e| match mode {
                Mode::Subword => e.token.split(' ').count(),
                Mode::Char => e.token.chars().count(),
            })
            .max()
            .unwrap_or(1)
            .max(1);
        Tokenizer { mode, fine, coarse, max_phrase }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn fine_vocab(&self) -> &Vocabulary {
        self.fine
    }

    pub fn coarse_vocab(&self) -> &Vocabulary {
        self.coarse
    }

    /// Greedy longest-match pieces for one word. A word that cannot be
    /// fully segmented becomes a single `[UNK]`.
    fn wordpiece(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut matched = None;
            for end in (start + 1..=chars.len()).rev() {
                let mut piece = String::new();
                if start > 0 {
                    piece.push_str("##");
                }
                piece.extend(chars[start..end].iter());
                if let Some(id) = self.fine.id_of(&piece) {
                    if !Vocabulary::is_special(id) {
                        matched = Some((end, piece));
                        break;
                    }
                }
            }
            match matched {
                Some((end, piece)) => {
                    pieces.push(piece);
                    start = end;
                }
                None => return vec!["[UNK]".to_string()],
            }
        }
        pieces
    }

    fn items_from_text(&self, text: &str) -> Vec<BasisItem> {
        let normalized = normalize(text, self.mode);
        basis_tokens(&normalized, self.mode)
            .into_iter()
            .map(|surface| {
                let pieces = match self.mode {
                    Mode::Subword => self.wordpiece(&surface),
                    Mode::Char => {
                        let id = self.fine.id_of(&surface);
                        let known = matches!(id, Some(i) if !Vocabulary::is_special(i));
                        vec![if known { surface.clone() } else { "[UNK]".to_string() }]
                    }
                };
                BasisItem { surface, pieces }
            })
            .collect()
    }

    /// Fine-grained tokens of `text`. Never fails: unknown material becomes
    /// `[UNK]`.
    pub fn tokenize_fine(&self, text: &str) -> Vec<String> {
        self.items_from_text(text)
            .into_iter()
            .flat_map(|item| item.pieces)
            .collect()
    }

    /// Left-to-right longest lexicon match over basis items. Items that do
    /// not start a phrase become singleton coarse tokens.
    fn match_coarse(&self, items: &[BasisItem]) -> Vec<CoarseToken> {
        let joiner = self.mode.joiner();
        // Fine offsets for each item boundary.
        let mut offsets = Vec::with_capacity(items.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for item in items {
            acc += item.pieces.len();
            offsets.push(acc);
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < items.len() {
            let mut taken = 1;
            let upper = self.max_phrase.min(items.len() - i);
            for k in (2..=upper).rev() {
                let surface: Vec<&str> =
                    items[i..i + k].iter().map(|it| it.surface.as_str()).collect();
                let candidate = surface.join(joiner);
                if let Some(id) = self.coarse.id_of(&candidate) {
                    if !Vocabulary::is_special(id) {
                        taken = k;
                        break;
                    }
                }
            }
            let surface: Vec<&str> =
                items[i..i + taken].iter().map(|it| it.surface.as_str()).collect();
            out.push(CoarseToken {
                surface: surface.join(joiner),
                fine_start: offsets[i],
                fine_end: offsets[i + taken],
            });
            i += taken;
        }
        out
    }

    /// Coarse tokens (with raw fine alignment) straight from text. The
    /// surfaces here are the true ones even where the fine stream emitted
    /// `[UNK]`, which is what the coarse-rate statistic needs.
    pub fn coarse_tokens(&self, text: &str) -> Vec<CoarseToken> {
        self.match_coarse(&self.items_from_text(text))
    }

    /// Per basis token: its surface and the half-open raw fine-token range
    /// it produces. Used to map character offsets onto fine positions.
    pub fn word_spans(&self, text: &str) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for item in self.items_from_text(text) {
            let n = item.pieces.len();
            out.push((item.surface, offset, offset + n));
            offset += n;
        }
        out
    }

    /// Coarse tokenization over an existing fine-token sequence per the
    /// left-to-right longest-match rule. Returns the coarse surfaces and
    /// their half-open fine ranges.
    pub fn tokenize_coarse(&self, fine_tokens: &[String]) -> (Vec<String>, Vec<(u32, u32)>) {
        let items = self.items_from_fine(fine_tokens);
        let coarse = self.match_coarse(&items);
        let surfaces = coarse.iter().map(|c| c.surface.clone()).collect();
        let ranges =
            coarse.iter().map(|c| (c.fine_start as u32, c.fine_end as u32)).collect();
        (surfaces, ranges)
    }

    /// Reconstructs basis items from fine tokens: `##` pieces continue the
    /// current word; anything else (including `[UNK]`) starts a new one.
    fn items_from_fine(&self, fine_tokens: &[String]) -> Vec<BasisItem> {
        let mut items: Vec<BasisItem> = Vec::new();
        for token in fine_tokens {
            let continuation =
                self.mode == Mode::Subword && token.starts_with("##") && !items.is_empty();
            if continuation {
                let item = items.last_mut().unwrap();
                item.surface.push_str(&token[2..]);
                item.pieces.push(token.clone());
            } else {
                items.push(BasisItem { surface: token.clone(), pieces: vec![token.clone()] });
            }
        }
        items
    }

    /// Inverse of [`Tokenizer::tokenize_fine`] up to `[UNK]`: pieces are
    /// joined (dropping `##`), words separated per mode.
    pub fn detokenize(&self, fine_tokens: &[String]) -> String {
        let items = self.items_from_fine(fine_tokens);
        let surfaces: Vec<&str> = items.iter().map(|it| it.surface.as_str()).collect();
        surfaces.join(self.mode.joiner())
    }

    /// Builds the full aligned pair for one text or a sentence pair, with
    /// `[CLS]`/`[SEP]` framing, 0/1 segment ids, and tail truncation at
    /// whole-coarse-token granularity so nesting survives.
    pub fn encode(
        &self,
        text_a: &str,
        text_b: Option<&str>,
        max_fine_len: usize,
        max_coarse_len: usize,
    ) -> Result<TokenSeqPair, TokenizeError> {
        if max_fine_len < 3 {
            return Err(TokenizeError::MaxLenTooSmall { stream: "fine", got: max_fine_len });
        }
        if max_coarse_len < 3 {
            return Err(TokenizeError::MaxLenTooSmall { stream: "coarse", got: max_coarse_len });
        }

        struct Segment {
            items: Vec<BasisItem>,
            coarse: Vec<CoarseToken>,
        }
        let mut segments = Vec::new();
        let items_a = self.items_from_text(text_a);
        let coarse_a = self.match_coarse(&items_a);
        segments.push(Segment { items: items_a, coarse: coarse_a });
        if let Some(b) = text_b {
            let items_b = self.items_from_text(b);
            let coarse_b = self.match_coarse(&items_b);
            segments.push(Segment { items: items_b, coarse: coarse_b });
        }

        let fine_count = |s: &Segment| s.items.iter().map(|it| it.pieces.len()).sum::<usize>();
        let extra = segments.len(); // one [SEP] per segment
        loop {
            let total_fine = 1 + segments.iter().map(fine_count).sum::<usize>() + extra;
            let total_coarse =
                1 + segments.iter().map(|s| s.coarse.len()).sum::<usize>() + extra;
            if total_fine <= max_fine_len && total_coarse <= max_coarse_len {
                break;
            }
            // Drop the last coarse token of the currently longer segment
            // (ties go to the second segment).
            let victim = if segments.len() == 2 {
                let (fa, fb) = (fine_count(&segments[0]), fine_count(&segments[1]));
                if segments[1].coarse.is_empty() || (fa > fb && !segments[0].coarse.is_empty()) {
                    0
                } else {
                    1
                }
            } else {
                0
            };
            let seg = &mut segments[victim];
            match seg.coarse.pop() {
                Some(dropped) => {
                    let drop_fine = dropped.fine_end - dropped.fine_start;
                    let mut remaining = drop_fine;
                    while remaining > 0 {
                        let last = seg.items.last_mut().expect("items cover coarse ranges");
                        if last.pieces.len() <= remaining {
                            remaining -= last.pieces.len();
                            seg.items.pop();
                        } else {
                            // A coarse token always covers whole items.
                            unreachable!("coarse token split an item");
                        }
                    }
                }
                None => break, // nothing left to trim
            }
        }

        let mut fine_ids = vec![CLS_ID];
        let mut coarse_ids = vec![CLS_ID];
        let mut fine_segments = vec![0u8];
        let mut coarse_segments = vec![0u8];
        let mut alignment: Vec<(u32, u32)> = Vec::new();

        for (seg_idx, seg) in segments.iter().enumerate() {
            let seg_id = seg_idx as u8;
            let fine_base = fine_ids.len();
            for item in &seg.items {
                for piece in &item.pieces {
                    fine_ids.push(self.fine.id_or_unk(piece));
                    fine_segments.push(seg_id);
                }
            }
            for tok in &seg.coarse {
                coarse_ids.push(self.coarse.id_or_unk(&tok.surface));
                coarse_segments.push(seg_id);
                alignment.push((
                    (fine_base + tok.fine_start) as u32,
                    (fine_base + tok.fine_end) as u32,
                ));
            }
            // The [SEP] closing this segment appears in both streams; in
            // between segments it is part of the interior and aligned 1:1.
            let fine_sep_pos = fine_ids.len() as u32;
            fine_ids.push(SEP_ID);
            fine_segments.push(seg_id);
            coarse_ids.push(SEP_ID);
            coarse_segments.push(seg_id);
            if seg_idx + 1 < segments.len() {
                alignment.push((fine_sep_pos, fine_sep_pos + 1));
            }
        }

        let pair = TokenSeqPair { fine_ids, coarse_ids, alignment, fine_segments, coarse_segments };
        debug_assert_eq!(pair.validate(), Ok(()));
        Ok(pair)
    }
}

/// Convenience for tests and the CLI: surfaces of a pair's streams.
pub fn surfaces(pair: &TokenSeqPair, fine: &Vocabulary, coarse: &Vocabulary) -> (Vec<String>, Vec<String>) {
    let f = pair
        .fine_ids
        .iter()
        .map(|&id| fine.token_of(id).unwrap_or("[UNK]").to_string())
        .collect();
    let c = pair
        .coarse_ids
        .iter()
        .map(|&id| coarse.token_of(id).unwrap_or("[UNK]").to_string())
        .collect();
    (f, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Granularity, UNK_ID};

    fn vocab(granularity: Granularity, tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_entries(
            granularity,
            tokens.iter().map(|t| (t.to_string(), 10u64)),
        )
        .unwrap()
    }

    #[test]
    fn words_in_vocab_pass_through() {
        let fine = vocab(Granularity::Fine, &["ice", "cream"]);
        let coarse = vocab(Granularity::Coarse, &["ice cream"]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        assert_eq!(tok.tokenize_fine("Ice  Cream"), vec!["ice", "cream"]);
        assert_eq!(tok.tokenize_fine(""), Vec::<String>::new());
    }

    #[test]
    fn greedy_longest_match_subwords() {
        let fine = vocab(Granularity::Fine, &["un", "##happy", "##ness", "unhap"]);
        let coarse = vocab(Granularity::Coarse, &[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        // "unhap" is longer than "un" at position 0, but then "pyness" has
        // no continuation piece, so the whole word degrades to [UNK]; the
        // greedy matcher is per-position, not backtracking.
        assert_eq!(tok.tokenize_fine("unhappyness"), vec!["[UNK]"]);
        // Without the trap prefix the trace is un → ##happy → ##ness.
        let fine2 = vocab(Granularity::Fine, &["un", "##happy", "##ness"]);
        let tok2 = Tokenizer::new(Mode::Subword, &fine2, &coarse);
        assert_eq!(tok2.tokenize_fine("unhappyness"), vec!["un", "##happy", "##ness"]);
    }

    #[test]
    fn coarse_greedy_match_and_alignment() {
        let fine = vocab(Granularity::Fine, &["new", "york", "is", "nice"]);
        let coarse = vocab(Granularity::Coarse, &["new york", "new", "york"]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let fine_tokens = tok.tokenize_fine("new york is nice");
        let (coarse_tokens, ranges) = tok.tokenize_coarse(&fine_tokens);
        assert_eq!(coarse_tokens, vec!["new york", "is", "nice"]);
        assert_eq!(ranges, vec![(0, 2), (2, 3), (3, 4)]);
    }

    #[test]
    fn empty_input_yields_empty_streams() {
        let fine = vocab(Granularity::Fine, &[]);
        let coarse = vocab(Granularity::Coarse, &[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let (coarse_tokens, ranges) = tok.tokenize_coarse(&[]);
        assert!(coarse_tokens.is_empty());
        assert!(ranges.is_empty());
    }

    #[test]
    fn char_mode_segments_canonical_sentence() {
        let chars: Vec<&str> = vec!["南", "京", "市", "长", "江", "大", "桥"];
        let fine = vocab(Granularity::Fine, &chars);
        let coarse = vocab(Granularity::Coarse, &["南京市", "长江大桥"]);
        let tok = Tokenizer::new(Mode::Char, &fine, &coarse);
        let fine_tokens = tok.tokenize_fine("南京市长江大桥");
        assert_eq!(fine_tokens.len(), 7);
        let (coarse_tokens, ranges) = tok.tokenize_coarse(&fine_tokens);
        assert_eq!(coarse_tokens, vec!["南京市", "长江大桥"]);
        assert_eq!(ranges, vec![(0, 3), (3, 7)]);
    }

    #[test]
    fn encode_single_text() {
        let fine = vocab(Granularity::Fine, &["ice", "cream"]);
        let coarse = vocab(Granularity::Coarse, &["ice cream"]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let pair = tok.encode("ice cream", None, 16, 16).unwrap();
        assert_eq!(pair.fine_ids, vec![CLS_ID, 5, 6, SEP_ID]);
        assert_eq!(pair.coarse_ids, vec![CLS_ID, 5, SEP_ID]);
        assert_eq!(pair.alignment, vec![(1, 3)]);
        pair.validate().unwrap();
    }

    #[test]
    fn encode_empty_text() {
        let fine = vocab(Granularity::Fine, &[]);
        let coarse = vocab(Granularity::Coarse, &[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let pair = tok.encode("", None, 8, 8).unwrap();
        assert_eq!(pair.fine_ids, vec![CLS_ID, SEP_ID]);
        assert_eq!(pair.coarse_ids, vec![CLS_ID, SEP_ID]);
        assert!(pair.alignment.is_empty());
        pair.validate().unwrap();
    }

    #[test]
    fn encode_pair_segments_and_mid_sep() {
        let fine = vocab(Granularity::Fine, &["a", "b", "c"]);
        let coarse = vocab(Granularity::Coarse, &["a", "b", "c"]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let pair = tok.encode("a b", Some("c"), 16, 16).unwrap();
        // [CLS] a b [SEP] c [SEP]
        assert_eq!(pair.fine_ids.len(), 6);
        assert_eq!(pair.fine_segments, vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(pair.coarse_segments, vec![0, 0, 0, 0, 1, 1]);
        // Interior alignment covers a, b, the mid [SEP], and c.
        assert_eq!(pair.alignment, vec![(1, 2), (2, 3), (3, 4), (4, 5)]);
        pair.validate().unwrap();
    }

    #[test]
    fn truncation_drops_whole_coarse_tokens() {
        let words: Vec<&str> = vec!["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"];
        let fine = vocab(Granularity::Fine, &words);
        let coarse = vocab(Granularity::Coarse, &words);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let pair = tok.encode("w0 w1 w2 w3 w4 w5 w6 w7 w8 w9", None, 8, 64).unwrap();
        // Singleton coarse tokens, so the fine budget is hit exactly.
        assert_eq!(pair.fine_len(), 8);
        pair.validate().unwrap();
    }

    #[test]
    fn truncation_preserves_nesting_with_phrases() {
        let fine = vocab(Granularity::Fine, &["new", "york", "is", "in"]);
        let coarse = vocab(Granularity::Coarse, &["new york", "is", "in"]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        // Budget 5 would cut inside "new york"; the whole phrase must go.
        let pair = tok.encode("is in new york", None, 5, 64).unwrap();
        assert!(pair.fine_len() <= 5);
        pair.validate().unwrap();
        let (_, coarse_surfaces) = surfaces(&pair, &fine, &coarse);
        assert_eq!(coarse_surfaces, vec!["[CLS]", "is", "in", "[SEP]"]);
    }

    #[test]
    fn max_len_below_minimum_rejected() {
        let fine = vocab(Granularity::Fine, &[]);
        let coarse = vocab(Granularity::Coarse, &[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        assert!(matches!(
            tok.encode("x", None, 2, 8),
            Err(TokenizeError::MaxLenTooSmall { stream: "fine", .. })
        ));
    }

    #[test]
    fn round_trip_without_unk() {
        let fine = vocab(Granularity::Fine, &["play", "##ing", "the", "game"]);
        let coarse = vocab(Granularity::Coarse, &[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let text = "Playing the game";
        let tokens = tok.tokenize_fine(text);
        assert_eq!(tokens, vec!["play", "##ing", "the", "game"]);
        assert_eq!(tok.detokenize(&tokens), normalize(text, Mode::Subword));
    }

    #[test]
    fn unknown_words_become_unk() {
        let fine = vocab(Granularity::Fine, &["known"]);
        let coarse = vocab(Granularity::Coarse, &[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        assert_eq!(tok.tokenize_fine("known zzz"), vec!["known", "[UNK]"]);
        let pair = tok.encode("known zzz", None, 16, 16).unwrap();
        assert_eq!(pair.fine_ids[2], UNK_ID);
    }

    #[test]
    fn coarse_matching_uses_true_surfaces_behind_unk() {
        // "zzz" is missing from the fine vocabulary but present in the
        // lexicon: the fine stream reads [UNK] while the coarse stream
        // still resolves the real surface.
        let fine = vocab(Granularity::Fine, &["known"]);
        let coarse = vocab(Granularity::Coarse, &["zzz"]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let pair = tok.encode("zzz known", None, 16, 16).unwrap();
        assert_eq!(pair.fine_ids[1], UNK_ID);
        assert_eq!(pair.coarse_ids[1], coarse.id_of("zzz").unwrap());
    }
}
