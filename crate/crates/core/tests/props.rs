//! Property tests: lexicon–oracle equivalence, threshold monotonicity,
//! n-gram table consistency, tokenization nesting/round-trip, and mask-plan
//! invariants.

use ambert_core::check::lexicon_oracle;
use ambert_core::pretrain::{make_mask_plan, MaskAction};
use ambert_core::tokenizer::{normalize, Mode, Tokenizer};
use ambert_core::vocab::{
    build_fine_vocab, build_phrase_lexicon, count_ngrams, FineVocabMode, Granularity,
    LexiconCriteria, Vocabulary, NUM_SPECIALS,
};
use proptest::prelude::*;

const ALPHABET: &[&str] = &["ape", "bat", "cow", "dog", "eel", "fox"];

fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(
        prop::collection::vec(prop::sample::select(ALPHABET).prop_map(String::from), 0..12),
        1..8,
    )
}

fn criteria_strategy() -> impl Strategy<Value = LexiconCriteria> {
    (1u64..4, 0u8..=4, 2usize..4).prop_map(|(min_frequency, dep, max_ngram_order)| {
        LexiconCriteria {
            min_frequency,
            min_dependence: dep as f64 * 0.25,
            max_ngram_order,
        }
    })
}

proptest! {
    /// The builder equals a brute-force enumeration applying the thresholds
    /// directly, including entry order.
    #[test]
    fn lexicon_matches_brute_force_oracle(
        corpus in corpus_strategy(),
        criteria in criteria_strategy(),
    ) {
        let table = count_ngrams(corpus.iter().cloned(), criteria.max_ngram_order);
        let lexicon = build_phrase_lexicon(&table, &criteria, " ").unwrap();
        let expected = lexicon_oracle(&corpus, &criteria, " ");
        let got: Vec<(String, u64)> = lexicon
            .entries()
            .iter()
            .skip(NUM_SPECIALS)
            .map(|e| (e.token.clone(), e.count))
            .collect();
        prop_assert_eq!(got, expected);
    }

    /// Raising either threshold never adds a phrase.
    #[test]
    fn thresholds_are_monotone(
        corpus in corpus_strategy(),
        criteria in criteria_strategy(),
    ) {
        let table = count_ngrams(corpus.iter().cloned(), criteria.max_ngram_order);
        let base = build_phrase_lexicon(&table, &criteria, " ").unwrap();

        let stricter_freq = LexiconCriteria {
            min_frequency: criteria.min_frequency + 1,
            ..criteria
        };
        let tighter = build_phrase_lexicon(&table, &stricter_freq, " ").unwrap();
        for e in tighter.entries().iter().skip(NUM_SPECIALS) {
            prop_assert!(base.contains(&e.token), "freq tightening added {:?}", e.token);
        }

        let stricter_dep = LexiconCriteria {
            min_dependence: (criteria.min_dependence + 0.25).min(1.0),
            ..criteria
        };
        let tighter = build_phrase_lexicon(&table, &stricter_dep, " ").unwrap();
        for e in tighter.entries().iter().skip(NUM_SPECIALS) {
            prop_assert!(base.contains(&e.token), "dep tightening added {:?}", e.token);
        }
    }

    /// Every k-gram's (k−1)-prefix is present with at least its count.
    #[test]
    fn prefix_counts_dominate(corpus in corpus_strategy()) {
        let table = count_ngrams(corpus.iter().cloned(), 4);
        for (gram, count) in table.iter() {
            if gram.len() > 1 {
                let prefix = &gram[..gram.len() - 1];
                prop_assert!(table.count(prefix) >= count);
            }
        }
    }

    /// Identical corpus and criteria give identical vocabularies.
    #[test]
    fn lexicon_build_is_deterministic(
        corpus in corpus_strategy(),
        criteria in criteria_strategy(),
    ) {
        let t1 = count_ngrams(corpus.iter().cloned(), criteria.max_ngram_order);
        let t2 = count_ngrams(corpus.iter().cloned(), criteria.max_ngram_order);
        let a = build_phrase_lexicon(&t1, &criteria, " ").unwrap();
        let b = build_phrase_lexicon(&t2, &criteria, " ").unwrap();
        prop_assert_eq!(a, b);
    }
}

fn dual_vocabs(corpus: &[Vec<String>]) -> (Vocabulary, Vocabulary) {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for w in line {
            *counts.entry(w.clone()).or_insert(0) += 1;
        }
    }
    let fine = build_fine_vocab(
        counts.iter().map(|(w, &c)| (w.clone(), c)),
        FineVocabMode::Subword,
        256,
    )
    .unwrap();
    let table = count_ngrams(corpus.iter().cloned(), 3);
    let criteria = LexiconCriteria { min_frequency: 1, min_dependence: 0.3, max_ngram_order: 3 };
    let coarse = build_phrase_lexicon(&table, &criteria, " ").unwrap();
    (fine, coarse)
}

proptest! {
    /// Nesting and tiling: encoded pairs always validate, and the covering
    /// coarse token is defined for every interior fine position.
    #[test]
    fn encoded_pairs_nest_and_tile(
        corpus in corpus_strategy(),
        line in prop::collection::vec(prop::sample::select(ALPHABET).prop_map(String::from), 0..20),
        max_fine in 3usize..24,
        max_coarse in 3usize..24,
    ) {
        let (fine, coarse) = dual_vocabs(&corpus);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let text = line.join(" ");
        let pair = tok.encode(&text, None, max_fine, max_coarse).unwrap();
        prop_assert!(pair.validate().is_ok(), "{:?}", pair.validate());
        prop_assert!(pair.fine_len() <= max_fine);
        prop_assert!(pair.coarse_len() <= max_coarse);
        for i in 1..=pair.interior_fine() {
            prop_assert!(pair.cover(i).is_some());
        }
    }

    /// Round-trip: when no [UNK] was emitted, detokenization reproduces the
    /// normalized input.
    #[test]
    fn fine_round_trip_without_unk(
        corpus in corpus_strategy(),
        line in prop::collection::vec(prop::sample::select(ALPHABET).prop_map(String::from), 0..20),
    ) {
        let (fine, coarse) = dual_vocabs(&corpus);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let text = line.join(" ");
        let tokens = tok.tokenize_fine(&text);
        if tokens.iter().all(|t| t != "[UNK]") {
            prop_assert_eq!(tok.detokenize(&tokens), normalize(&text, Mode::Subword));
        }
    }

    /// Tokenization is a pure function of (text, vocabularies).
    #[test]
    fn tokenization_is_deterministic(
        corpus in corpus_strategy(),
        line in prop::collection::vec(prop::sample::select(ALPHABET).prop_map(String::from), 0..20),
    ) {
        let (fine, coarse) = dual_vocabs(&corpus);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let text = line.join(" ");
        let a = tok.encode(&text, None, 64, 64).unwrap();
        let b = tok.encode(&text, None, 64, 64).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Arbitrary unicode never panics and still yields a valid pair.
    #[test]
    fn arbitrary_text_encodes_cleanly(text in "\\PC{0,40}") {
        let (fine, coarse) = dual_vocabs(&[]);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let pair = tok.encode(&text, None, 16, 16).unwrap();
        prop_assert!(pair.validate().is_ok());
        let tok_cn = Tokenizer::new(Mode::Char, &fine, &coarse);
        let pair = tok_cn.encode(&text, None, 16, 16).unwrap();
        prop_assert!(pair.validate().is_ok());
    }
}

proptest! {
    /// Projection rule and coarse budget over random encoded pairs.
    #[test]
    fn mask_plans_respect_projection_and_budget(
        corpus in corpus_strategy(),
        line in prop::collection::vec(prop::sample::select(ALPHABET).prop_map(String::from), 1..20),
        seed in 0u64..1000,
    ) {
        let (fine, coarse) = dual_vocabs(&corpus);
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let text = line.join(" ");
        let pair = tok.encode(&text, None, 64, 64).unwrap();
        let plan = make_mask_plan(&pair, 0.15, fine.len(), coarse.len(), seed);

        // Budget: 15% of non-special interior coarse tokens, nearest, min 1.
        let candidates = (1..pair.coarse_len() - 1)
            .filter(|&p| !Vocabulary::is_special(pair.coarse_ids[p]))
            .count();
        let expected = if candidates == 0 {
            0
        } else {
            ((0.15 * candidates as f64).round() as usize).max(1).min(candidates)
        };
        prop_assert_eq!(plan.coarse.len(), expected);

        // Projection: every fine position under a selected coarse token is
        // selected, and nothing else is.
        let fine_flags = plan.fine_flags(pair.fine_len());
        let mut expected_flags = vec![false; pair.fine_len()];
        for m in &plan.coarse {
            let (s, e) = pair.alignment[m.position - 1];
            for i in s..e {
                expected_flags[i as usize] = true;
            }
        }
        prop_assert_eq!(fine_flags, expected_flags);

        // Replacement ids stay inside the non-special id range.
        for m in plan.fine.iter().chain(plan.coarse.iter()) {
            if let MaskAction::Random(id) = m.action {
                prop_assert!(id as usize >= NUM_SPECIALS);
            }
        }
    }
}
