//! Independent verification oracles for the test suites.
//!
//! Everything here deliberately avoids the implementation paths it is used
//! to check: gradients come from central finite differences, and the
//! lexicon oracle recounts n-grams by direct window enumeration into an
//! ordered map.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::model::Model;
use crate::params::SlotId;
use crate::rng::{rng_from_seed, uniform};
use crate::tensor::Tensor;
use crate::vocab::LexiconCriteria;

/// Central finite differences of `f` with respect to one parameter slot.
pub fn finite_diff_param<F>(
    model: &mut Model<f64>,
    id: SlotId,
    eps: f64,
    mut f: F,
) -> Tensor<f64>
where
    F: FnMut(&Model<f64>) -> f64,
{
    let len = model.store().value(id).len();
    let mut grad = Tensor::zeros(model.store().value(id).shape());
    for i in 0..len {
        let orig = model.store().value(id).data()[i];
        model.store_mut().value_mut(id).data_mut()[i] = orig + eps;
        let f_plus = f(model);
        model.store_mut().value_mut(id).data_mut()[i] = orig - eps;
        let f_minus = f(model);
        model.store_mut().value_mut(id).data_mut()[i] = orig;
        grad.data_mut()[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    grad
}

/// Central finite differences of `f` with respect to a free tensor.
pub fn finite_diff_tensor<F>(x: &mut Tensor<f64>, eps: f64, mut f: F) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let f_plus = f(x);
        x.data_mut()[i] = orig - eps;
        let f_minus = f(x);
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    grad
}

/// Largest per-element relative error, with a small floor so near-zero
/// gradients compare on an absolute scale.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-3);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Fixed pseudo-random projection coefficients in `[-1, 1]`; summing an
/// operator's output against these catches transposition bugs that a plain
/// sum would miss.
pub fn rand_coeffs(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..len).map(|_| 2.0 * uniform::<f64>(&mut rng) - 1.0).collect()
}

/// Brute-force phrase lexicon: enumerate every k-gram of every document by
/// direct sliding windows into an ordered map, apply the thresholds
/// literally, and sort by (length desc, count desc, surface asc).
/// Returns the non-special entries the real builder must reproduce.
pub fn lexicon_oracle(
    docs: &[Vec<String>],
    criteria: &LexiconCriteria,
    joiner: &str,
) -> Vec<(String, u64)> {
    let mut counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for doc in docs {
        for k in 1..=criteria.max_ngram_order {
            if doc.len() < k {
                continue;
            }
            for start in 0..=doc.len() - k {
                let gram = doc[start..start + k].to_vec();
                *counts.entry(gram).or_insert(0) += 1;
            }
        }
    }
    let mut selected: Vec<(usize, u64, String)> = Vec::new();
    for (gram, &count) in &counts {
        if count < criteria.min_frequency {
            continue;
        }
        if gram.len() >= 2 {
            let prefix = gram[..gram.len() - 1].to_vec();
            let prefix_count = counts[&prefix];
            if (count as f64 / prefix_count as f64) < criteria.min_dependence {
                continue;
            }
        }
        selected.push((gram.len(), count, gram.join(joiner)));
    }
    selected.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    selected.into_iter().map(|(_, count, surface)| (surface, count)).collect()
}

/// Synthetic bigram grammar for training smoke tests: word `i` is followed
/// by word `(i+1) mod n` with probability `follow`, otherwise by a uniform
/// draw over the remaining words. Low conditional entropy by construction,
/// so a masked-token objective has plenty to learn.
pub struct BigramGrammar {
    pub n_words: usize,
    pub follow: f64,
}

impl BigramGrammar {
    pub fn new(n_words: usize, follow: f64) -> Self {
        assert!(n_words >= 2 && (0.0..=1.0).contains(&follow));
        BigramGrammar { n_words, follow }
    }

    pub fn word(&self, i: usize) -> String {
        alloc::format!("tok{i}")
    }

    pub fn sentence(&self, rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> String {
        let mut current = crate::rng::uniform_index(rng, self.n_words);
        let mut words = Vec::with_capacity(len);
        words.push(self.word(current));
        for _ in 1..len {
            let next = if uniform::<f64>(rng) < self.follow {
                (current + 1) % self.n_words
            } else {
                // Uniform over the words other than the designated successor.
                let mut pick = crate::rng::uniform_index(rng, self.n_words - 1);
                if pick >= (current + 1) % self.n_words {
                    pick += 1;
                }
                pick
            };
            words.push(self.word(next));
            current = next;
        }
        words.join(" ")
    }

    /// One line per sentence, deterministic in the seed.
    pub fn corpus(&self, seed: u64, sentences: usize, len: usize) -> Vec<String> {
        let mut rng = rng_from_seed(seed);
        (0..sentences).map(|_| self.sentence(&mut rng, len)).collect()
    }

    /// Analytic conditional entropy `H(next | prev)` in nats — the ceiling
    /// a left-context predictor can reach, and an upper bound on what a
    /// both-sides MLM predictor needs. Used to confirm that a loss target
    /// is information-theoretically attainable.
    pub fn conditional_entropy(&self) -> f64 {
        let p = self.follow;
        let rest = self.n_words as f64 - 1.0;
        let mut h = 0.0;
        if p > 0.0 {
            h -= p * num_traits::Float::ln(p);
        }
        if p < 1.0 {
            h -= (1.0 - p) * num_traits::Float::ln((1.0 - p) / rest);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn finite_difference_recovers_a_quadratic_gradient() {
        // f(x) = Σ x_i² → ∇f = 2x.
        let mut x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let grad = finite_diff_tensor(&mut x, 1e-4, |t| t.data().iter().map(|v| v * v).sum());
        let expected = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&expected, grad.data()) < 1e-8);
    }

    #[test]
    fn oracle_reproduces_demo_lexicon() {
        let docs =
            vec!["new york is in new york".split_whitespace().map(|s| s.to_string()).collect()];
        let criteria =
            LexiconCriteria { min_frequency: 2, min_dependence: 0.9, max_ngram_order: 2 };
        let entries = lexicon_oracle(&docs, &criteria, " ");
        assert_eq!(
            entries,
            vec![
                ("new york".to_string(), 2),
                ("new".to_string(), 2),
                ("york".to_string(), 2)
            ]
        );
    }
}
