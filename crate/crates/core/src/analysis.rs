//! Diagnostics: attention-map extraction, [CLS] distance statistics, and
//! the coarse-token rate.
//!
//! The distance pair is cosine distance `CD = 1 − cos(r_x0, r_z0)` and the
//! normalized Euclidean distance `ED = ‖û − v̂‖₂` over the L2-normalized
//! vectors, which makes `ED = √(2·CD)` an exact identity and a built-in
//! cross-check.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::model::{Model, ModelError, RunMode, Variant};
use crate::tensor::{dot, pairwise_sum, Real, Tensor};
use crate::tokenizer::{TokenSeqPair, Tokenizer};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    LayerOutOfRange { layer: usize, layers: usize },
    HeadOutOfRange { head: usize, heads: usize },
    /// Requested per-stream maps from a hybrid run or the joint map from a
    /// dual run.
    StreamUnavailable { requested: &'static str, variant: Variant },
    /// The [CLS] distance needs two independent encoders.
    HybridClsDistance,
    EmptySample,
    Model(ModelError),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::LayerOutOfRange { layer, layers } => {
                write!(f, "layer {layer} outside 0..{layers}")
            }
            AnalysisError::HeadOutOfRange { head, heads } => {
                write!(f, "head {head} outside 0..{heads}")
            }
            AnalysisError::StreamUnavailable { requested, variant } => {
                write!(f, "{requested} attention is not produced by the {variant} variant")
            }
            AnalysisError::HybridClsDistance => {
                write!(f, "hybrid has one joint encoder; the dual [CLS] distance is undefined")
            }
            AnalysisError::EmptySample => write!(f, "sample contains no coarse tokens"),
            AnalysisError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for AnalysisError {}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        AnalysisError::Model(e)
    }
}

/// Which attention tensor to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapStream {
    Fine,
    Coarse,
    /// Hybrid's single attention over the concatenated sequence.
    Joint,
}

impl MapStream {
    pub fn as_str(self) -> &'static str {
        match self {
            MapStream::Fine => "fine",
            MapStream::Coarse => "coarse",
            MapStream::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fine" => Some(MapStream::Fine),
            "coarse" => Some(MapStream::Coarse),
            "joint" => Some(MapStream::Joint),
            _ => None,
        }
    }
}

/// One head's attention probabilities with surface-token labels.
#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    /// Row-stochastic `[s, s]`; row = query position, column = key.
    pub probs: Tensor<T>,
    pub labels: Vec<String>,
    pub layer: usize,
    pub head: usize,
}

fn stream_labels(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().map(|&id| vocab.token_of(id).unwrap_or("[UNK]").to_string()).collect()
}

/// Extracts the exact attention probabilities of one layer/head from an
/// evaluation forward pass, labeled by surface tokens.
pub fn attention_map<T: Real>(
    model: &Model<T>,
    pair: &TokenSeqPair,
    fine_vocab: &Vocabulary,
    coarse_vocab: &Vocabulary,
    layer: usize,
    head: usize,
    stream: MapStream,
) -> Result<AttentionMap<T>, AnalysisError> {
    let cfg = model.config();
    if layer >= cfg.layers {
        return Err(AnalysisError::LayerOutOfRange { layer, layers: cfg.layers });
    }
    if head >= cfg.heads {
        return Err(AnalysisError::HeadOutOfRange { head, heads: cfg.heads });
    }
    let hybrid = cfg.variant == Variant::Hybrid;
    match (stream, hybrid) {
        (MapStream::Joint, false) => {
            return Err(AnalysisError::StreamUnavailable {
                requested: "joint",
                variant: cfg.variant,
            })
        }
        (MapStream::Fine | MapStream::Coarse, true) => {
            return Err(AnalysisError::StreamUnavailable {
                requested: stream.as_str(),
                variant: cfg.variant,
            })
        }
        _ => {}
    }

    let (out, _) = model.forward(pair, RunMode::eval())?;
    let (per_layer, labels) = match stream {
        MapStream::Fine => (
            &out.fine.as_ref().expect("dual run").attention[layer],
            stream_labels(&pair.fine_ids, fine_vocab),
        ),
        MapStream::Coarse => (
            &out.coarse.as_ref().expect("dual run").attention[layer],
            stream_labels(&pair.coarse_ids, coarse_vocab),
        ),
        MapStream::Joint => {
            let mut labels = stream_labels(&pair.fine_ids, fine_vocab);
            labels.extend(stream_labels(&pair.coarse_ids, coarse_vocab));
            (&out.joint_attention[layer], labels)
        }
    };
    let s = labels.len();
    let mut probs = Tensor::zeros(&[s, s]);
    for i in 0..s {
        probs.row_mut(i).copy_from_slice(per_layer.row(head * s + i));
    }
    Ok(AttentionMap { probs, labels, layer, head })
}

/// Cosine distance and normalized Euclidean distance between two vectors.
pub fn cd_ed<T: Real>(u: &[T], v: &[T]) -> (T, T) {
    debug_assert_eq!(u.len(), v.len());
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == T::zero() || nv == T::zero() {
        // Degenerate input: treat the zero vector as maximally dissimilar.
        return (T::one(), T::one());
    }
    let cos = dot(u, v) / (nu * nv);
    let cd = T::one() - cos;
    let mut sq = T::zero();
    for (&a, &b) in u.iter().zip(v.iter()) {
        let diff = a / nu - b / nv;
        sq = sq + diff * diff;
    }
    (cd, sq.sqrt())
}

/// Dataset means of CD and ED over the two [CLS] representations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceStats {
    pub cosine_distance_mean: f64,
    pub normalized_euclidean_mean: f64,
    pub count: usize,
}

/// Mean [CLS] distances over a dataset. Requires a dual-stream variant.
/// Means use pairwise summation, so they are independent of any processing
/// order.
pub fn cls_distance<T: Real>(
    model: &Model<T>,
    pairs: &[TokenSeqPair],
) -> Result<DistanceStats, AnalysisError> {
    if model.config().variant == Variant::Hybrid {
        return Err(AnalysisError::HybridClsDistance);
    }
    if pairs.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    let mut cds = Vec::with_capacity(pairs.len());
    let mut eds = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (out, _) = model.forward(pair, RunMode::eval())?;
        let (cd, ed) = cd_ed(out.fine_cls(), out.coarse_cls());
        cds.push(cd.to_f64());
        eds.push(ed.to_f64());
    }
    let n = pairs.len() as f64;
    Ok(DistanceStats {
        cosine_distance_mean: pairwise_sum(&cds) / n,
        normalized_euclidean_mean: pairwise_sum(&eds) / n,
        count: pairs.len(),
    })
}

/// Count of coarse tokens whose surface is absent from the fine vocabulary,
/// over the total number of coarse tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoarseRate {
    pub absent: usize,
    pub total: usize,
}

impl CoarseRate {
    pub fn rate(&self) -> f64 {
        self.absent as f64 / self.total as f64
    }
}

/// Tokenizes each line at both granularities and measures how many coarse
/// tokens fall outside the fine vocabulary (the multi-grainedness proxy).
pub fn coarse_rate<'a, I>(tokenizer: &Tokenizer<'_>, lines: I) -> Result<CoarseRate, AnalysisError>
where
    I: IntoIterator<Item = &'a str>,
{
    let fine_vocab = tokenizer.fine_vocab();
    let mut absent = 0;
    let mut total = 0;
    for line in lines {
        for token in tokenizer.coarse_tokens(line) {
            total += 1;
            if !fine_vocab.contains(&token.surface) {
                absent += 1;
            }
        }
    }
    if total == 0 {
        return Err(AnalysisError::EmptySample);
    }
    Ok(CoarseRate { absent, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Mode;
    use crate::vocab::Granularity;
    use alloc::vec;

    #[test]
    fn identical_vectors_have_zero_distances() {
        let u = [0.3f64, -1.2, 0.7];
        let (cd, ed) = cd_ed(&u, &u);
        assert!(cd.abs() < 1e-12);
        assert!(ed.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let u = [1.0f64, 0.0];
        let v = [0.0f64, 1.0];
        let (cd, ed) = cd_ed(&u, &v);
        assert!((cd - 1.0).abs() < 1e-12);
        assert!((ed - (2.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn antipodal_vectors() {
        let u = [2.0f64, -1.0, 0.5];
        let v = [-2.0f64, 1.0, -0.5];
        let (cd, ed) = cd_ed(&u, &v);
        assert!((cd - 2.0).abs() < 1e-12);
        assert!((ed - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ed_equals_sqrt_of_twice_cd() {
        let u = [0.9f64, -0.3, 1.7, 0.2];
        let v = [-0.4f64, 0.8, 0.6, -1.1];
        let (cd, ed) = cd_ed(&u, &v);
        assert!((ed - (2.0 * cd).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constructed_sample_rate_is_exactly_ten_percent() {
        // Ten sentences, four coarse tokens each; sentences 0..4 carry one
        // two-word phrase (absent from the fine vocabulary by nature).
        let words = ["aa", "bb", "cc", "dd", "ee", "ff"];
        let fine = Vocabulary::from_entries(
            Granularity::Fine,
            words.iter().map(|w| (w.to_string(), 5u64)),
        )
        .unwrap();
        let coarse = Vocabulary::from_entries(
            Granularity::Coarse,
            [("aa bb".to_string(), 5u64)]
                .into_iter()
                .chain(words.iter().map(|w| (w.to_string(), 5u64))),
        )
        .unwrap();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let mut lines: Vec<&str> = vec!["aa bb cc dd ee"; 4]; // phrase + 3 singles
        lines.extend(vec!["cc dd ee ff"; 6]); // 4 singles
        let rate = coarse_rate(&tok, lines.iter().copied()).unwrap();
        assert_eq!(rate.total, 40);
        assert_eq!(rate.absent, 4);
        assert!((rate.rate() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn all_singletons_in_fine_vocab_rate_zero() {
        let words = ["aa", "bb"];
        let fine = Vocabulary::from_entries(
            Granularity::Fine,
            words.iter().map(|w| (w.to_string(), 5u64)),
        )
        .unwrap();
        let coarse = Vocabulary::from_entries(
            Granularity::Coarse,
            words.iter().map(|w| (w.to_string(), 5u64)),
        )
        .unwrap();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        let rate = coarse_rate(&tok, ["aa bb", "bb aa"]).unwrap();
        assert_eq!(rate.absent, 0);
        assert_eq!(rate.total, 4);
    }

    #[test]
    fn empty_sample_rejected() {
        let fine = Vocabulary::from_entries(Granularity::Fine, []).unwrap();
        let coarse = Vocabulary::from_entries(Granularity::Coarse, []).unwrap();
        let tok = Tokenizer::new(Mode::Subword, &fine, &coarse);
        assert!(matches!(coarse_rate(&tok, [""]), Err(AnalysisError::EmptySample)));
    }
}
