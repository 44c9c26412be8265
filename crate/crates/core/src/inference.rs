//! Inference: full dual-encoder prediction and the efficient single-encoder
//! mode, plus dev-set-driven encoder selection.
//!
//! A single-stream run of `ambert`/`combo` is the exact sub-computation of
//! the dual run — same code path, same inputs — so its hidden states are
//! bitwise identical to the corresponding stream of a full forward.

use alloc::vec::Vec;
use core::fmt;

use crate::finetune::{
    best_span, span_f1, span_logits, FinetuneError, TaskData,
};
use crate::model::{Model, ModelConfig, ModelError, RunMode, Stream, Variant};
use crate::tensor::{argmax, Real};
use crate::tokenizer::TokenSeqPair;

/// Which encoder(s) run at prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Both,
    FineOnly,
    CoarseOnly,
}

impl PredictMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictMode::Both => "both",
            PredictMode::FineOnly => "fine",
            PredictMode::CoarseOnly => "coarse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "both" => Some(PredictMode::Both),
            "fine" => Some(PredictMode::FineOnly),
            "coarse" => Some(PredictMode::CoarseOnly),
            _ => None,
        }
    }
}

impl fmt::Display for PredictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceError {
    /// Span features are fine-indexed; the coarse encoder alone cannot
    /// produce them.
    CoarseOnlySpan,
    /// Hybrid interleaves the streams; single-stream modes are undefined.
    HybridSingleStream,
    Finetune(FinetuneError),
    Model(ModelError),
}

impl fmt::Display for InferenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceError::CoarseOnlySpan => {
                write!(f, "span prediction requires the fine stream; coarse-only mode rejected")
            }
            InferenceError::HybridSingleStream => write!(
                f,
                "hybrid runs one encoder over the concatenated streams; single-stream inference is undefined"
            ),
            InferenceError::Finetune(e) => write!(f, "{e}"),
            InferenceError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for InferenceError {}

impl From<FinetuneError> for InferenceError {
    fn from(e: FinetuneError) -> Self {
        InferenceError::Finetune(e)
    }
}

impl From<ModelError> for InferenceError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::VariantMismatch(_) => InferenceError::HybridSingleStream,
            other => InferenceError::Model(other),
        }
    }
}

/// A classification prediction with its per-label scores and the FLOPs
/// spent (encoder matmuls plus the head product).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelPrediction<T> {
    pub label: usize,
    pub scores: Vec<T>,
    pub flops: u64,
}

/// A span prediction (inclusive fine interior positions).
#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub flops: u64,
}

fn head_logits<T: Real>(model: &Model<T>, input: &[T], weight_name: &'static str, bias_name: &'static str) -> Result<Vec<T>, FinetuneError> {
    let w = model.store().lookup(weight_name).map_err(|_| FinetuneError::HeadMissing(weight_name))?;
    let b = model.store().lookup(bias_name).map_err(|_| FinetuneError::HeadMissing(bias_name))?;
    let weight = model.store().value(w);
    let bias = model.store().value(b);
    let labels = weight.cols();
    let mut logits: Vec<T> = bias.data().to_vec();
    for (j, &x) in input.iter().enumerate() {
        let w_row = weight.row(j);
        for l in 0..labels {
            logits[l] = logits[l] + x * w_row[l];
        }
    }
    Ok(logits)
}

/// Classifies one encoded input. `both` uses the joint head over
/// `[r_x0, r_z0]`; each single-stream mode runs only that encoder and its
/// own head, at roughly half the encoder cost.
pub fn predict_label<T: Real>(
    model: &Model<T>,
    pair: &TokenSeqPair,
    mode: PredictMode,
) -> Result<LabelPrediction<T>, InferenceError> {
    use crate::finetune::{
        HEAD_JOINT_BIAS, HEAD_JOINT_WEIGHT, HEAD_X_BIAS, HEAD_X_WEIGHT, HEAD_Z_BIAS,
        HEAD_Z_WEIGHT,
    };
    let d = model.config().hidden;
    match mode {
        PredictMode::Both => {
            let (out, _) = model.forward(pair, RunMode::eval())?;
            let mut input: Vec<T> = Vec::with_capacity(2 * d);
            input.extend_from_slice(out.fine_cls());
            input.extend_from_slice(out.coarse_cls());
            let logits = head_logits(model, &input, HEAD_JOINT_WEIGHT, HEAD_JOINT_BIAS)?;
            let flops = out.flops + 2 * (2 * d * logits.len()) as u64;
            Ok(LabelPrediction { label: argmax(&logits), scores: logits, flops })
        }
        PredictMode::FineOnly | PredictMode::CoarseOnly => {
            let (stream, w, b) = match mode {
                PredictMode::FineOnly => (Stream::Fine, HEAD_X_WEIGHT, HEAD_X_BIAS),
                _ => (Stream::Coarse, HEAD_Z_WEIGHT, HEAD_Z_BIAS),
            };
            let mut flops = 0u64;
            let out = {
                let (out, _trace) = model.forward_stream(stream, pair, RunMode::eval())?;
                flops += stream_flops(
                    model.config(),
                    match stream {
                        Stream::Fine => pair.fine_ids.len(),
                        Stream::Coarse => pair.coarse_ids.len(),
                    },
                );
                out
            };
            let logits = head_logits(model, out.cls(), w, b)?;
            flops += 2 * (d * logits.len()) as u64;
            Ok(LabelPrediction { label: argmax(&logits), scores: logits, flops })
        }
    }
}

/// Predicts an answer span. Fine-only mode runs just the fine encoder and
/// scores `[fine_i, 0]`, dropping the coarse half of each scorer.
pub fn predict_span<T: Real>(
    model: &Model<T>,
    pair: &TokenSeqPair,
    mode: PredictMode,
) -> Result<SpanPrediction, InferenceError> {
    let d = model.config().hidden;
    let interior = pair.interior_fine();
    let head = 2 * (2 * d) as u64 * interior as u64 * 2;
    match mode {
        PredictMode::CoarseOnly => Err(InferenceError::CoarseOnlySpan),
        PredictMode::Both => {
            let (out, _) = model.forward(pair, RunMode::eval())?;
            let (start_logits, end_logits) = span_logits(model, &out, pair, true)?;
            let (start, end) = best_span(&start_logits, &end_logits);
            Ok(SpanPrediction { start, end, flops: out.flops + head })
        }
        PredictMode::FineOnly => {
            let (stream_out, _) = model.forward_stream(Stream::Fine, pair, RunMode::eval())?;
            // Assemble a fine-only view; span_logits never touches the
            // coarse hidden states when `use_coarse` is false.
            let out = crate::model::ForwardOutput {
                fine: Some(stream_out),
                coarse: None,
                joint_attention: Vec::new(),
                fine_len: pair.fine_ids.len(),
                coarse_len: pair.coarse_ids.len(),
                flops: 0,
            };
            let (start_logits, end_logits) = span_logits(model, &out, pair, false)?;
            let (start, end) = best_span(&start_logits, &end_logits);
            let flops = stream_flops(model.config(), pair.fine_ids.len()) + head;
            Ok(SpanPrediction { start, end, flops })
        }
    }
}

/// Accuracy of one prediction mode over a labeled dataset; spans score
/// exact match. Deterministic: ties inside argmax go to the lower index.
pub fn evaluate_mode<T: Real>(
    model: &Model<T>,
    data: &TaskData,
    mode: PredictMode,
) -> Result<(usize, usize), InferenceError> {
    match data {
        TaskData::Classification(examples) => {
            let mut correct = 0;
            for e in examples {
                let pred = predict_label(model, &e.pair, mode)?;
                if pred.label == e.label {
                    correct += 1;
                }
            }
            Ok((correct, examples.len()))
        }
        TaskData::Span(examples) => {
            let mut correct = 0;
            for e in examples {
                let pred = predict_span(model, &e.pair, mode)?;
                if pred.start == e.start && pred.end == e.end {
                    correct += 1;
                }
            }
            Ok((correct, examples.len()))
        }
    }
}

/// Mean token-overlap F1 of span predictions (classification: accuracy).
pub fn evaluate_f1<T: Real>(
    model: &Model<T>,
    data: &TaskData,
    mode: PredictMode,
) -> Result<f64, InferenceError> {
    match data {
        TaskData::Classification(_) => {
            let (correct, total) = evaluate_mode(model, data, mode)?;
            Ok(correct as f64 / total.max(1) as f64)
        }
        TaskData::Span(examples) => {
            let mut sum = 0.0;
            for e in examples {
                let pred = predict_span(model, &e.pair, mode)?;
                sum += span_f1((pred.start, pred.end), (e.start, e.end));
            }
            Ok(sum / examples.len().max(1) as f64)
        }
    }
}

/// Chooses the single-encoder mode by dev-set evaluation: span tasks always
/// take the fine encoder (the coarse one cannot score spans); for
/// classification both single-stream modes are evaluated and the higher
/// accuracy wins, ties to `fine`.
pub fn select_encoder<T: Real>(
    model: &Model<T>,
    dev: &TaskData,
) -> Result<PredictMode, InferenceError> {
    if model.config().variant == Variant::Hybrid {
        return Err(InferenceError::HybridSingleStream);
    }
    if matches!(dev, TaskData::Span(_)) {
        return Ok(PredictMode::FineOnly);
    }
    let (fine_correct, _) = evaluate_mode(model, dev, PredictMode::FineOnly)?;
    let (coarse_correct, _) = evaluate_mode(model, dev, PredictMode::CoarseOnly)?;
    Ok(if coarse_correct > fine_correct {
        PredictMode::CoarseOnly
    } else {
        PredictMode::FineOnly
    })
}

/// Analytic matrix-multiply FLOPs of one encoder stack over a length-`s`
/// sequence: per layer, the four `d×d` projections (`8sd²`), the score and
/// value products (`4s²d`), and the FFN (`4sdf`). Mirrors exactly what the
/// forward pass instruments.
pub fn stream_flops(cfg: &ModelConfig, s: usize) -> u64 {
    let (s, d, f) = (s as u64, cfg.hidden as u64, cfg.ffn_inner as u64);
    (cfg.layers as u64) * (8 * s * d * d + 4 * s * s * d + 4 * s * d * f)
}

/// Analytic encoder FLOPs for a full forward in `mode`.
pub fn forward_flops(
    cfg: &ModelConfig,
    fine_len: usize,
    coarse_len: usize,
    mode: PredictMode,
) -> u64 {
    match (cfg.variant, mode) {
        (Variant::Hybrid, PredictMode::Both) => stream_flops(cfg, fine_len + coarse_len),
        (_, PredictMode::Both) => stream_flops(cfg, fine_len) + stream_flops(cfg, coarse_len),
        (_, PredictMode::FineOnly) => stream_flops(cfg, fine_len),
        (_, PredictMode::CoarseOnly) => stream_flops(cfg, coarse_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::{init_classifier_heads, init_span_head, ClassExample, SpanExample};
    use crate::model::ModelConfig;
    
    use alloc::vec;

    fn tiny_model(variant: Variant) -> Model<f32> {
        let cfg = ModelConfig {
            variant,
            layers: 1,
            hidden: 8,
            heads: 2,
            head_size: 4,
            ffn_inner: 16,
            max_positions: 16,
            fine_vocab_size: 12,
            coarse_vocab_size: 12,
            hidden_dropout: 0.0,
            attention_dropout: 0.0,
            type_vocab: 2,
            granularity_embedding: true,
        };
        Model::init(cfg, 31).unwrap()
    }

    fn pair() -> TokenSeqPair {
        TokenSeqPair {
            fine_ids: vec![2, 5, 6, 7, 3],
            coarse_ids: vec![2, 8, 9, 3],
            alignment: vec![(1, 3), (3, 4)],
            fine_segments: vec![0; 5],
            coarse_segments: vec![0; 4],
        }
    }

    #[test]
    fn fine_only_cls_is_bitwise_identical_to_dual_run() {
        for variant in [Variant::Ambert, Variant::Combo] {
            let mut model = tiny_model(variant);
            init_classifier_heads(&mut model, 2, 3).unwrap();
            let p = pair();
            let (full, _) = model.forward(&p, RunMode::eval()).unwrap();
            let (single, _) = model.forward_stream(Stream::Fine, &p, RunMode::eval()).unwrap();
            let full_bits: Vec<u32> = full.fine_cls().iter().map(|v| v.to_bits()).collect();
            let single_bits: Vec<u32> = single.cls().iter().map(|v| v.to_bits()).collect();
            assert_eq!(full_bits, single_bits);
        }
    }

    #[test]
    fn hybrid_rejects_single_stream_modes() {
        let mut model = tiny_model(Variant::Hybrid);
        init_classifier_heads(&mut model, 2, 3).unwrap();
        assert!(matches!(
            predict_label(&model, &pair(), PredictMode::FineOnly),
            Err(InferenceError::HybridSingleStream)
        ));
        let dev = TaskData::Classification(vec![ClassExample { pair: pair(), label: 0 }]);
        assert!(matches!(select_encoder(&model, &dev), Err(InferenceError::HybridSingleStream)));
    }

    #[test]
    fn coarse_only_span_rejected_and_span_selects_fine() {
        let mut model = tiny_model(Variant::Ambert);
        init_span_head(&mut model, 3).unwrap();
        assert!(matches!(
            predict_span(&model, &pair(), PredictMode::CoarseOnly),
            Err(InferenceError::CoarseOnlySpan)
        ));
        let dev = TaskData::Span(vec![SpanExample { pair: pair(), start: 1, end: 2 }]);
        assert_eq!(select_encoder(&model, &dev).unwrap(), PredictMode::FineOnly);
    }

    #[test]
    fn equal_dev_scores_tie_to_fine() {
        let mut model = tiny_model(Variant::Ambert);
        let heads = init_classifier_heads(&mut model, 2, 3).unwrap();
        // Zero both single-stream heads: identical (chance) accuracy.
        model.store_mut().value_mut(heads.x_weight).fill(0.0);
        model.store_mut().value_mut(heads.z_weight).fill(0.0);
        let dev = TaskData::Classification(vec![
            ClassExample { pair: pair(), label: 0 },
            ClassExample { pair: pair(), label: 1 },
        ]);
        assert_eq!(select_encoder(&model, &dev).unwrap(), PredictMode::FineOnly);
    }

    #[test]
    fn instrumented_flops_match_census() {
        for variant in [Variant::Ambert, Variant::Combo, Variant::Hybrid] {
            let model = tiny_model(variant);
            let p = pair();
            let (out, _) = model.forward(&p, RunMode::eval()).unwrap();
            let expected = forward_flops(
                model.config(),
                p.fine_ids.len(),
                p.coarse_ids.len(),
                PredictMode::Both,
            );
            assert_eq!(out.flops, expected, "variant {variant}");
        }
    }

    #[test]
    fn fine_only_flops_are_half_of_both_on_equal_lengths() {
        let mut model = tiny_model(Variant::Ambert);
        init_classifier_heads(&mut model, 2, 3).unwrap();
        // Equal stream lengths: singleton coarse tokens.
        let p = TokenSeqPair {
            fine_ids: vec![2, 5, 6, 7, 3],
            coarse_ids: vec![2, 8, 9, 10, 3],
            alignment: vec![(1, 2), (2, 3), (3, 4)],
            fine_segments: vec![0; 5],
            coarse_segments: vec![0; 5],
        };
        let both = predict_label(&model, &p, PredictMode::Both).unwrap();
        let fine = predict_label(&model, &p, PredictMode::FineOnly).unwrap();
        // The joint head costs 2·(2d)·L, each single head 2·d·L, so the
        // halving is exact when the stream lengths match.
        assert_eq!(fine.flops, both.flops / 2);
    }

    #[test]
    fn missing_head_is_reported() {
        let model = tiny_model(Variant::Ambert);
        let err = predict_label(&model, &pair(), PredictMode::Both).unwrap_err();
        assert!(matches!(err, InferenceError::Finetune(FinetuneError::HeadMissing(_))));
    }

    #[test]
    fn single_stream_tensor_lengths_respected() {
        let mut model = tiny_model(Variant::Combo);
        init_classifier_heads(&mut model, 3, 3).unwrap();
        let p = pair();
        let coarse = predict_label(&model, &p, PredictMode::CoarseOnly).unwrap();
        assert_eq!(coarse.scores.len(), 3);
        let expected =
            stream_flops(model.config(), p.coarse_ids.len()) + 2 * (8 * 3) as u64;
        assert_eq!(coarse.flops, expected);
    }
}
