//! Vocabularies and phrase-lexicon induction.
//!
//! The coarse vocabulary is built from exact n-gram statistics: a k-gram
//! becomes a phrase when its frequency is high enough and its last token
//! depends strongly on the preceding ones, measured as the conditional
//! probability `count(g) / count(prefix(g))`.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use hashbrown::HashMap;

/// The five reserved tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Number of reserved ids (`0..5`).
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Fine,
    Coarse,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Fine => write!(f, "fine"),
            Granularity::Coarse => write!(f, "coarse"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VocabError {
    /// A token appears twice (second occurrence reported).
    DuplicateToken(String),
    /// Entry list does not start with the five specials in order.
    MissingSpecial(&'static str),
    /// Requested capacity cannot even hold the special tokens.
    TargetSizeTooSmall(usize),
    /// min_dependence outside [0, 1] or max_ngram_order < 2.
    InvalidCriteria(String),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::DuplicateToken(t) => write!(f, "duplicate token {t:?}"),
            VocabError::MissingSpecial(s) => write!(f, "missing special token {s}"),
            VocabError::TargetSizeTooSmall(n) => {
                write!(f, "target size {n} cannot hold the {NUM_SPECIALS} special tokens")
            }
            VocabError::InvalidCriteria(msg) => write!(f, "invalid lexicon criteria: {msg}"),
        }
    }
}

impl core::error::Error for VocabError {}

/// One vocabulary entry: surface form and its corpus count (0 for specials).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabEntry {
    pub token: String,
    pub count: u64,
}

/// A token↔id table for one granularity. Ids are dense `0..len` and the
/// five specials always occupy ids `0..5`.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    granularity: Granularity,
    entries: Vec<VocabEntry>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.granularity == other.granularity && self.entries == other.entries
    }
}

impl Vocabulary {
    /// Builds a vocabulary from `(token, count)` pairs for the non-special
    /// entries; specials are injected at ids 0..5.
    pub fn from_entries<I>(granularity: Granularity, non_special: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (String, u64)>,
    {
        let mut entries: Vec<VocabEntry> = SPECIAL_TOKENS
            .iter()
            .map(|t| VocabEntry { token: t.to_string(), count: 0 })
            .collect();
        for (token, count) in non_special {
            entries.push(VocabEntry { token, count });
        }
        Self::from_raw_entries(granularity, entries)
    }

    /// Builds from a complete entry list (specials included, in id order).
    pub fn from_raw_entries(
        granularity: Granularity,
        entries: Vec<VocabEntry>,
    ) -> Result<Self, VocabError> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if entries.get(i).map(|e| e.token.as_str()) != Some(*special) {
                return Err(VocabError::MissingSpecial(special));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (id, e) in entries.iter().enumerate() {
            if index.insert(e.token.clone(), id as u32).is_some() {
                return Err(VocabError::DuplicateToken(e.token.clone()));
            }
        }
        Ok(Vocabulary { granularity, entries, index })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.token.as_str())
    }

    /// Id for `token`, falling back to `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id_of(token).unwrap_or(UNK_ID)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }
}

/// Exact counts of all k-grams (1 ≤ k ≤ max_order) over basis tokens.
#[derive(Clone, Debug, Default)]
pub struct NGramTable {
    max_order: usize,
    counts: HashMap<Vec<String>, u64>,
    /// Lines that could not be decoded upstream; carried for diagnostics.
    rejected_lines: u64,
}

impl NGramTable {
    pub fn new(max_order: usize) -> Self {
        NGramTable { max_order, counts: HashMap::new(), rejected_lines: 0 }
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn count(&self, gram: &[String]) -> u64 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn count_of_strs(&self, gram: &[&str]) -> u64 {
        let key: Vec<String> = gram.iter().map(|s| s.to_string()).collect();
        self.count(&key)
    }

    pub fn is_degenerate(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<String>, u64)> {
        self.counts.iter().map(|(k, &v)| (k, v))
    }

    pub fn rejected_lines(&self) -> u64 {
        self.rejected_lines
    }

    pub fn note_rejected_line(&mut self) {
        self.rejected_lines += 1;
    }

    fn add(&mut self, gram: &[String]) {
        *self.counts.entry(gram.to_vec()).or_insert(0) += 1;
    }

    /// Merges another table by addition. Counting may be sharded across
    /// document subsets and merged; addition is order-independent, so the
    /// result is identical to single-pass counting.
    pub fn merge(&mut self, other: &NGramTable) {
        assert_eq!(self.max_order, other.max_order, "merging tables of different order");
        for (gram, count) in other.counts.iter() {
            *self.counts.entry(gram.clone()).or_insert(0) += count;
        }
        self.rejected_lines += other.rejected_lines;
    }
}

/// Counts every k-gram (1 ≤ k ≤ `max_order`) over the basis tokens of each
/// document. Windows never span document boundaries.
pub fn count_ngrams<D>(documents: D, max_order: usize) -> NGramTable
where
    D: IntoIterator<Item = Vec<String>>,
{
    assert!(max_order >= 2, "max_order must be at least 2");
    let mut table = NGramTable::new(max_order);
    for document in documents {
        for k in 1..=max_order {
            if document.len() < k {
                break;
            }
            for window in document.windows(k) {
                table.add(window);
            }
        }
    }
    table
}

/// Thresholds for phrase-lexicon induction.
#[derive(Clone, Copy, Debug)]
pub struct LexiconCriteria {
    /// Minimum corpus count for both singleton tokens and phrases.
    pub min_frequency: u64,
    /// Minimum conditional probability `count(g)/count(prefix(g))`.
    pub min_dependence: f64,
    /// Longest phrase considered, in basis tokens.
    pub max_ngram_order: usize,
}

impl Default for LexiconCriteria {
    fn default() -> Self {
        LexiconCriteria { min_frequency: 16, min_dependence: 0.4, max_ngram_order: 4 }
    }
}

impl LexiconCriteria {
    pub fn validate(&self) -> Result<(), VocabError> {
        if !(0.0..=1.0).contains(&self.min_dependence) {
            return Err(VocabError::InvalidCriteria(alloc::format!(
                "min_dependence {} outside [0, 1]",
                self.min_dependence
            )));
        }
        if self.max_ngram_order < 2 {
            return Err(VocabError::InvalidCriteria(alloc::format!(
                "max_ngram_order {} must be at least 2",
                self.max_ngram_order
            )));
        }
        Ok(())
    }
}

/// Surface form of a phrase: basis tokens joined by `joiner` (a space for
/// word basis, the empty string for character basis).
pub fn phrase_surface(gram: &[String], joiner: &str) -> String {
    gram.join(joiner)
}

/// Builds the coarse vocabulary: every basis token with count ≥
/// `min_frequency` as a singleton, plus every k-gram (2 ≤ k ≤ max order)
/// passing both the frequency and the dependence thresholds. Entries are
/// ordered by (length desc, count desc, surface asc) after the specials,
/// which fixes ids deterministically.
pub fn build_phrase_lexicon(
    table: &NGramTable,
    criteria: &LexiconCriteria,
    joiner: &str,
) -> Result<Vocabulary, VocabError> {
    criteria.validate()?;
    let max_order = criteria.max_ngram_order.min(table.max_order());
    // (basis length, count, surface)
    let mut selected: Vec<(usize, u64, String)> = Vec::new();
    for (gram, count) in table.iter() {
        let k = gram.len();
        if k > max_order || count < criteria.min_frequency {
            continue;
        }
        if k >= 2 {
            let prefix_count = table.count(&gram[..k - 1]);
            debug_assert!(prefix_count >= count, "prefix count below gram count");
            let dependence = count as f64 / prefix_count as f64;
            if dependence < criteria.min_dependence {
                continue;
            }
        }
        selected.push((k, count, phrase_surface(gram, joiner)));
    }
    selected.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    Vocabulary::from_entries(
        Granularity::Coarse,
        selected.into_iter().map(|(_, count, surface)| (surface, count)),
    )
}

/// Fine-vocabulary construction mode — see [`build_fine_vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FineVocabMode {
    /// Every character occurring more than once becomes a token.
    Char,
    /// Frequency-greedy subword inventory: the character alphabet (initial
    /// and `##`-continuation forms), whole words, and `##`-suffix pieces,
    /// ranked by count, capped at `target_size`.
    Subword,
}

/// Builds the fine vocabulary from basis words (or whitespace chunks in
/// character mode) with their counts.
pub fn build_fine_vocab<I>(
    words: I,
    mode: FineVocabMode,
    target_size: usize,
) -> Result<Vocabulary, VocabError>
where
    I: IntoIterator<Item = (String, u64)>,
{
    if target_size <= NUM_SPECIALS {
        return Err(VocabError::TargetSizeTooSmall(target_size));
    }
    match mode {
        FineVocabMode::Char => {
            let mut char_counts: HashMap<String, u64> = HashMap::new();
            for (word, count) in words {
                for c in word.chars() {
                    *char_counts.entry(c.to_string()).or_insert(0) += count;
                }
            }
            let mut kept: Vec<(String, u64)> =
                char_counts.into_iter().filter(|&(_, c)| c > 1).collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            kept.truncate(target_size - NUM_SPECIALS);
            Vocabulary::from_entries(Granularity::Fine, kept)
        }
        FineVocabMode::Subword => {
            let word_counts: Vec<(String, u64)> = words.into_iter().collect();
            // The alphabet guarantees every known-character word stays
            // decomposable, so it is admitted ahead of larger pieces.
            let mut alphabet: HashMap<String, u64> = HashMap::new();
            let mut candidates: HashMap<String, u64> = HashMap::new();
            for (word, count) in &word_counts {
                let chars: Vec<char> = word.chars().collect();
                for (i, c) in chars.iter().enumerate() {
                    let piece = if i == 0 {
                        c.to_string()
                    } else {
                        let mut s = String::from("##");
                        s.push(*c);
                        s
                    };
                    *alphabet.entry(piece).or_insert(0) += count;
                }
                // Whole word and its ##-suffix pieces.
                *candidates.entry(word.clone()).or_insert(0) += count;
                for split in 1..chars.len() {
                    let mut piece = String::from("##");
                    piece.extend(chars[split..].iter());
                    *candidates.entry(piece).or_insert(0) += count;
                }
            }
            for key in alphabet.keys() {
                candidates.remove(key);
            }
            let mut alpha: Vec<(String, u64)> = alphabet.into_iter().collect();
            alpha.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut rest: Vec<(String, u64)> = candidates.into_iter().collect();
            rest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

            let budget = target_size - NUM_SPECIALS;
            alpha.truncate(budget);
            let remaining = budget - alpha.len();
            rest.truncate(remaining);
            alpha.extend(rest);
            alpha.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            Vocabulary::from_entries(Granularity::Fine, alpha)
        }
    }
}
