//! Fine-tuning: regularized multi-head classification and span detection.
//!
//! Classification trains three heads at once — over the fine `[CLS]`, the
//! coarse `[CLS]`, and their concatenation — plus an agreement penalty
//! `λ‖ỹ_x − ỹ_z‖₂` pulling the two single-stream softmax outputs together.
//! Span detection scores every interior fine position on the concatenation
//! of its fine hidden state and the hidden state of the coarse token
//! covering it.

use alloc::vec::Vec;
use core::fmt;

use crate::model::{ForwardOutput, Model, ModelError, RunMode};
use crate::optim::{adam_step, AdamHyper, AdamState, OptimError};
use crate::ops::cross_entropy;
use crate::params::SlotId;
use crate::rng::{rng_from_seed, shuffle, sub_seed, truncated_normal};
use crate::tensor::{dot, real, Real, Tensor};
use crate::tokenizer::TokenSeqPair;

pub const HEAD_X_WEIGHT: &str = "heads.x.weight";
pub const HEAD_X_BIAS: &str = "heads.x.bias";
pub const HEAD_Z_WEIGHT: &str = "heads.z.weight";
pub const HEAD_Z_BIAS: &str = "heads.z.bias";
pub const HEAD_JOINT_WEIGHT: &str = "heads.joint.weight";
pub const HEAD_JOINT_BIAS: &str = "heads.joint.bias";
pub const SPAN_START_WEIGHT: &str = "heads.span.start.weight";
pub const SPAN_START_BIAS: &str = "heads.span.start.bias";
pub const SPAN_END_WEIGHT: &str = "heads.span.end.weight";
pub const SPAN_END_BIAS: &str = "heads.span.end.bias";

#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneError {
    LabelOutOfRange { index: usize, label: usize, num_labels: usize },
    AnswerOutOfRange { index: usize, start: usize, end: usize, interior: usize },
    HeadMissing(&'static str),
    HeadsAlreadyPresent,
    NumLabelsMismatch { head: usize, got: usize },
    EmptyDataset(&'static str),
    Model(ModelError),
    Optim(OptimError),
}

impl fmt::Display for FinetuneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinetuneError::LabelOutOfRange { index, label, num_labels } => {
                write!(f, "example {index}: label {label} outside 0..{num_labels}")
            }
            FinetuneError::AnswerOutOfRange { index, start, end, interior } => write!(
                f,
                "example {index}: span {start}..={end} outside the fine interior 1..={interior}"
            ),
            FinetuneError::HeadMissing(name) => write!(f, "head parameter {name} missing"),
            FinetuneError::HeadsAlreadyPresent => {
                write!(f, "fine-tuning heads already present in this checkpoint")
            }
            FinetuneError::NumLabelsMismatch { head, got } => {
                write!(f, "heads hold {head} labels, data needs {got}")
            }
            FinetuneError::EmptyDataset(which) => write!(f, "{which} dataset is empty"),
            FinetuneError::Model(e) => write!(f, "{e}"),
            FinetuneError::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for FinetuneError {}

impl From<ModelError> for FinetuneError {
    fn from(e: ModelError) -> Self {
        FinetuneError::Model(e)
    }
}

impl From<OptimError> for FinetuneError {
    fn from(e: OptimError) -> Self {
        FinetuneError::Optim(e)
    }
}

/// Resolved classification head slots.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierHeads {
    pub x_weight: SlotId,
    pub x_bias: SlotId,
    pub z_weight: SlotId,
    pub z_bias: SlotId,
    pub joint_weight: SlotId,
    pub joint_bias: SlotId,
}

impl ClassifierHeads {
    pub fn resolve<T: Real>(model: &Model<T>) -> Result<Self, FinetuneError> {
        let get = |name: &'static str| {
            model.store().lookup(name).map_err(|_| FinetuneError::HeadMissing(name))
        };
        Ok(ClassifierHeads {
            x_weight: get(HEAD_X_WEIGHT)?,
            x_bias: get(HEAD_X_BIAS)?,
            z_weight: get(HEAD_Z_WEIGHT)?,
            z_bias: get(HEAD_Z_BIAS)?,
            joint_weight: get(HEAD_JOINT_WEIGHT)?,
            joint_bias: get(HEAD_JOINT_BIAS)?,
        })
    }

    pub fn num_labels<T: Real>(&self, model: &Model<T>) -> usize {
        model.store().value(self.x_weight).cols()
    }
}

/// Registers the three classification heads, freshly initialized.
pub fn init_classifier_heads<T: Real>(
    model: &mut Model<T>,
    num_labels: usize,
    seed: u64,
) -> Result<ClassifierHeads, FinetuneError> {
    if model.store().contains(HEAD_X_WEIGHT) {
        return Err(FinetuneError::HeadsAlreadyPresent);
    }
    let d = model.config().hidden;
    let mut rng = rng_from_seed(sub_seed(seed, "heads", 0));
    let mut normal = |shape: &[usize]| {
        let mut t = Tensor::<T>::zeros(shape);
        for v in t.data_mut() {
            *v = truncated_normal(&mut rng, crate::model::INIT_STD);
        }
        t
    };
    let x_w = normal(&[d, num_labels]);
    let z_w = normal(&[d, num_labels]);
    let j_w = normal(&[2 * d, num_labels]);
    let store = model.store_mut();
    let x_weight = store.register(HEAD_X_WEIGHT, x_w).expect("fresh");
    let x_bias = store.register(HEAD_X_BIAS, Tensor::zeros(&[num_labels])).expect("fresh");
    let z_weight = store.register(HEAD_Z_WEIGHT, z_w).expect("fresh");
    let z_bias = store.register(HEAD_Z_BIAS, Tensor::zeros(&[num_labels])).expect("fresh");
    let joint_weight = store.register(HEAD_JOINT_WEIGHT, j_w).expect("fresh");
    let joint_bias = store.register(HEAD_JOINT_BIAS, Tensor::zeros(&[num_labels])).expect("fresh");
    Ok(ClassifierHeads { x_weight, x_bias, z_weight, z_bias, joint_weight, joint_bias })
}

/// Registers the two span scorers (start/end) over `[fine_i, coarse_cover(i)]`.
pub fn init_span_head<T: Real>(model: &mut Model<T>, seed: u64) -> Result<(), FinetuneError> {
    if model.store().contains(SPAN_START_WEIGHT) {
        return Err(FinetuneError::HeadsAlreadyPresent);
    }
    let d = model.config().hidden;
    let mut rng = rng_from_seed(sub_seed(seed, "span-head", 0));
    let mut normal = |shape: &[usize]| {
        let mut t = Tensor::<T>::zeros(shape);
        for v in t.data_mut() {
            *v = truncated_normal(&mut rng, crate::model::INIT_STD);
        }
        t
    };
    let sw = normal(&[2 * d]);
    let ew = normal(&[2 * d]);
    let store = model.store_mut();
    store.register(SPAN_START_WEIGHT, sw).expect("fresh");
    store.register(SPAN_START_BIAS, Tensor::zeros(&[1])).expect("fresh");
    store.register(SPAN_END_WEIGHT, ew).expect("fresh");
    store.register(SPAN_END_BIAS, Tensor::zeros(&[1])).expect("fresh");
    Ok(())
}

fn linear_logits<T: Real>(x: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> Vec<T> {
    let labels = weight.cols();
    let mut logits: Vec<T> = bias.data().to_vec();
    for (j, &xv) in x.iter().enumerate() {
        let w_row = weight.row(j);
        for l in 0..labels {
            logits[l] = logits[l] + xv * w_row[l];
        }
    }
    logits
}

fn softmax_vec<T: Real>(logits: &[T]) -> Vec<T> {
    let mut max = logits[0];
    for &v in &logits[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().fold(T::zero(), |a, &b| a + b);
    let inv = sum.recip();
    for v in &mut out {
        *v = *v * inv;
    }
    out
}

/// Eq.-style loss split: the three cross entropies, the agreement term, and
/// their exact sum `total = ce_x + ce_z + ce_joint + λ·reg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationBreakdown<T> {
    pub ce_x: T,
    pub ce_z: T,
    pub ce_joint: T,
    pub reg: T,
    pub total: T,
}

/// Guard below which the agreement term is treated as exactly zero (its
/// gradient is undefined at the origin).
const REG_EPS: f64 = 1e-12;

struct ClassificationParts<T> {
    breakdown: ClassificationBreakdown<T>,
    probs_x: Vec<T>,
    probs_z: Vec<T>,
    logits_x: Vec<T>,
    logits_z: Vec<T>,
    logits_joint: Vec<T>,
}

fn classification_forward<T: Real>(
    model: &Model<T>,
    heads: &ClassifierHeads,
    output: &ForwardOutput<T>,
    label: usize,
    lambda: f64,
) -> Result<ClassificationParts<T>, FinetuneError> {
    let num_labels = heads.num_labels(model);
    if label >= num_labels {
        return Err(FinetuneError::LabelOutOfRange { index: 0, label, num_labels });
    }
    let store = model.store();
    let rx = output.fine_cls();
    let rz = output.coarse_cls();
    let logits_x = linear_logits(rx, store.value(heads.x_weight), store.value(heads.x_bias));
    let logits_z = linear_logits(rz, store.value(heads.z_weight), store.value(heads.z_bias));
    let mut joint_input: Vec<T> = Vec::with_capacity(rx.len() + rz.len());
    joint_input.extend_from_slice(rx);
    joint_input.extend_from_slice(rz);
    let logits_joint = linear_logits(
        &joint_input,
        store.value(heads.joint_weight),
        store.value(heads.joint_bias),
    );

    let (ce_x, _) = cross_entropy(&logits_x, label, T::one());
    let (ce_z, _) = cross_entropy(&logits_z, label, T::one());
    let (ce_joint, _) = cross_entropy(&logits_joint, label, T::one());
    let probs_x = softmax_vec(&logits_x);
    let probs_z = softmax_vec(&logits_z);
    let mut sq = T::zero();
    for (a, b) in probs_x.iter().zip(probs_z.iter()) {
        let diff = *a - *b;
        sq = sq + diff * diff;
    }
    let reg = sq.sqrt();
    let lambda_t = real::<T>(lambda);
    let total = ce_x + ce_z + ce_joint + lambda_t * reg;
    Ok(ClassificationParts {
        breakdown: ClassificationBreakdown { ce_x, ce_z, ce_joint, reg, total },
        probs_x,
        probs_z,
        logits_x,
        logits_z,
        logits_joint,
    })
}

/// The regularized multi-task classification loss, evaluation only.
pub fn classification_loss<T: Real>(
    model: &Model<T>,
    output: &ForwardOutput<T>,
    label: usize,
    lambda: f64,
) -> Result<ClassificationBreakdown<T>, FinetuneError> {
    let heads = ClassifierHeads::resolve(model)?;
    Ok(classification_forward(model, &heads, output, label, lambda)?.breakdown)
}

/// Loss plus gradients. Head gradients accumulate into the store; the
/// returned tensors are hidden-state gradients (non-zero only at the two
/// `[CLS]` rows) shaped for [`Model::backward`].
pub fn classification_loss_backward<T: Real>(
    model: &mut Model<T>,
    output: &ForwardOutput<T>,
    label: usize,
    lambda: f64,
    scale: T,
) -> Result<(ClassificationBreakdown<T>, Tensor<T>, Tensor<T>), FinetuneError> {
    let heads = ClassifierHeads::resolve(model)?;
    let parts = classification_forward(model, &heads, output, label, lambda)?;
    let d = model.config().hidden;
    let rx: Vec<T> = output.fine_cls().to_vec();
    let rz: Vec<T> = output.coarse_cls().to_vec();

    // Cross-entropy pieces.
    let (_, mut d_logits_x) = cross_entropy(&parts.logits_x, label, scale);
    let (_, mut d_logits_z) = cross_entropy(&parts.logits_z, label, scale);
    let (_, d_logits_joint) = cross_entropy(&parts.logits_joint, label, scale);

    // Agreement term: d‖δ‖/dỹ_x = δ/‖δ‖, pushed through each softmax.
    let reg = parts.breakdown.reg;
    if lambda != 0.0 && reg.to_f64() > REG_EPS {
        let coeff = real::<T>(lambda) * scale / reg;
        let delta: Vec<T> =
            parts.probs_x.iter().zip(&parts.probs_z).map(|(&a, &b)| a - b).collect();
        for (probs, d_logits, sign) in [
            (&parts.probs_x, &mut d_logits_x, T::one()),
            (&parts.probs_z, &mut d_logits_z, -T::one()),
        ] {
            let g: Vec<T> = delta.iter().map(|&v| v * coeff * sign).collect();
            let inner = dot(&g, probs);
            for (dl, (&p, &gv)) in d_logits.iter_mut().zip(probs.iter().zip(&g)) {
                *dl = *dl + p * (gv - inner);
            }
        }
    }

    let mut d_rx = alloc::vec![T::zero(); d];
    let mut d_rz = alloc::vec![T::zero(); d];
    let store = model.store_mut();
    for (weight, bias, input, d_logits, d_input_halves) in [
        (heads.x_weight, heads.x_bias, &rx[..], &d_logits_x, 0usize),
        (heads.z_weight, heads.z_bias, &rz[..], &d_logits_z, 1),
    ] {
        let w = store.value(weight).clone();
        let mut dw = Tensor::zeros(w.shape());
        for (j, &xv) in input.iter().enumerate() {
            let dw_row = dw.row_mut(j);
            let w_row = w.row(j);
            let target = if d_input_halves == 0 { &mut d_rx } else { &mut d_rz };
            for (l, &dl) in d_logits.iter().enumerate() {
                dw_row[l] = dw_row[l] + xv * dl;
                target[j] = target[j] + w_row[l] * dl;
            }
        }
        store.accumulate_grad(weight, &dw);
        let mut db = Tensor::zeros(&[d_logits.len()]);
        db.data_mut().copy_from_slice(d_logits);
        store.accumulate_grad(bias, &db);
    }
    {
        let w = store.value(heads.joint_weight).clone();
        let mut dw = Tensor::zeros(w.shape());
        let joint_input: Vec<T> = rx.iter().chain(rz.iter()).copied().collect();
        for (j, &xv) in joint_input.iter().enumerate() {
            let dw_row = dw.row_mut(j);
            let w_row = w.row(j);
            for (l, &dl) in d_logits_joint.iter().enumerate() {
                dw_row[l] = dw_row[l] + xv * dl;
                let g = w_row[l] * dl;
                if j < d {
                    d_rx[j] = d_rx[j] + g;
                } else {
                    d_rz[j - d] = d_rz[j - d] + g;
                }
            }
        }
        store.accumulate_grad(heads.joint_weight, &dw);
        let mut db = Tensor::zeros(&[d_logits_joint.len()]);
        db.data_mut().copy_from_slice(&d_logits_joint);
        store.accumulate_grad(heads.joint_bias, &db);
    }

    let mut d_fine = Tensor::zeros(output.fine_hidden().shape());
    let mut d_coarse = Tensor::zeros(output.coarse_hidden().shape());
    d_fine.row_mut(0).copy_from_slice(&d_rx);
    d_coarse.row_mut(0).copy_from_slice(&d_rz);
    Ok((parts.breakdown, d_fine, d_coarse))
}

/// Span features for interior fine position `i`: the fine hidden state
/// concatenated with the hidden state of the covering coarse token. When
/// `coarse` is absent (fine-only inference) the second half is zero, which
/// drops the coarse scorer contribution.
fn span_feature<T: Real>(
    fine: &Tensor<T>,
    coarse: Option<&Tensor<T>>,
    pair: &TokenSeqPair,
    i: usize,
) -> Vec<T> {
    let d = fine.cols();
    let mut feat = Vec::with_capacity(2 * d);
    feat.extend_from_slice(fine.row(i));
    match coarse {
        Some(c) => {
            let cover = pair.cover(i).expect("alignment tiles the interior");
            feat.extend_from_slice(c.row(cover));
        }
        None => feat.extend(core::iter::repeat(T::zero()).take(d)),
    }
    feat
}

/// Start/end logits over the fine interior positions `1..=interior`.
pub fn span_logits<T: Real>(
    model: &Model<T>,
    output: &ForwardOutput<T>,
    pair: &TokenSeqPair,
    use_coarse: bool,
) -> Result<(Vec<T>, Vec<T>), FinetuneError> {
    let get = |name: &'static str| {
        model.store().lookup(name).map_err(|_| FinetuneError::HeadMissing(name))
    };
    let sw = get(SPAN_START_WEIGHT)?;
    let sb = get(SPAN_START_BIAS)?;
    let ew = get(SPAN_END_WEIGHT)?;
    let eb = get(SPAN_END_BIAS)?;
    let store = model.store();
    let fine = output.fine_hidden();
    let coarse = if use_coarse { Some(output.coarse_hidden()) } else { None };
    let interior = pair.interior_fine();
    let mut start = Vec::with_capacity(interior);
    let mut end = Vec::with_capacity(interior);
    for i in 1..=interior {
        let feat = span_feature(fine, coarse, pair, i);
        start.push(dot(&feat, store.value(sw).data()) + store.value(sb).data()[0]);
        end.push(dot(&feat, store.value(ew).data()) + store.value(eb).data()[0]);
    }
    Ok((start, end))
}

/// Span loss: cross entropy of the start scorer plus cross entropy of the
/// end scorer, targets given as fine stream positions (inclusive).
pub fn span_loss<T: Real>(
    model: &Model<T>,
    output: &ForwardOutput<T>,
    pair: &TokenSeqPair,
    answer: (usize, usize),
) -> Result<T, FinetuneError> {
    let interior = pair.interior_fine();
    let (start, end) = answer;
    if start < 1 || end < start || end > interior {
        return Err(FinetuneError::AnswerOutOfRange { index: 0, start, end, interior });
    }
    let (start_logits, end_logits) = span_logits(model, output, pair, true)?;
    let (ls, _) = cross_entropy(&start_logits, start - 1, T::one());
    let (le, _) = cross_entropy(&end_logits, end - 1, T::one());
    Ok(ls + le)
}

/// Span loss plus gradients into the scorers and both hidden streams.
pub fn span_loss_backward<T: Real>(
    model: &mut Model<T>,
    output: &ForwardOutput<T>,
    pair: &TokenSeqPair,
    answer: (usize, usize),
    scale: T,
) -> Result<(T, Tensor<T>, Tensor<T>), FinetuneError> {
    let interior = pair.interior_fine();
    let (start, end) = answer;
    if start < 1 || end < start || end > interior {
        return Err(FinetuneError::AnswerOutOfRange { index: 0, start, end, interior });
    }
    let (start_logits, end_logits) = span_logits(model, output, pair, true)?;
    let (ls, d_start) = cross_entropy(&start_logits, start - 1, scale);
    let (le, d_end) = cross_entropy(&end_logits, end - 1, scale);

    let d = model.config().hidden;
    let mut d_fine = Tensor::zeros(output.fine_hidden().shape());
    let mut d_coarse = Tensor::zeros(output.coarse_hidden().shape());
    for (weight_name, bias_name, d_logits) in [
        (SPAN_START_WEIGHT, SPAN_START_BIAS, &d_start),
        (SPAN_END_WEIGHT, SPAN_END_BIAS, &d_end),
    ] {
        let w_id = model.store().lookup(weight_name).expect("checked above");
        let b_id = model.store().lookup(bias_name).expect("checked above");
        let w = model.store().value(w_id).clone();
        let mut dw = Tensor::zeros(&[2 * d]);
        let mut db_sum = T::zero();
        for (idx, &dl) in d_logits.iter().enumerate() {
            let i = idx + 1;
            let feat = span_feature(output.fine_hidden(), Some(output.coarse_hidden()), pair, i);
            for (j, &fv) in feat.iter().enumerate() {
                dw.data_mut()[j] = dw.data_mut()[j] + dl * fv;
            }
            db_sum = db_sum + dl;
            let cover = pair.cover(i).expect("alignment tiles the interior");
            let fine_row = d_fine.row_mut(i);
            for j in 0..d {
                fine_row[j] = fine_row[j] + dl * w.data()[j];
            }
            let coarse_row = d_coarse.row_mut(cover);
            for j in 0..d {
                coarse_row[j] = coarse_row[j] + dl * w.data()[d + j];
            }
        }
        model.store_mut().accumulate_grad(w_id, &dw);
        let mut db = Tensor::zeros(&[1]);
        db.data_mut()[0] = db_sum;
        model.store_mut().accumulate_grad(b_id, &db);
    }
    Ok((ls + le, d_fine, d_coarse))
}

#[derive(Clone, Debug)]
pub struct ClassExample {
    pub pair: TokenSeqPair,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct SpanExample {
    pub pair: TokenSeqPair,
    /// Inclusive fine-position span within the interior.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Classification(Vec<ClassExample>),
    Span(Vec<SpanExample>),
}

impl TaskData {
    pub fn len(&self) -> usize {
        match self {
            TaskData::Classification(v) => v.len(),
            TaskData::Span(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification { num_labels: usize },
    Span,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub task: TaskKind,
    /// Agreement coefficient; 1.0 by default, 0.0 in the multiple-choice
    /// style preset.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl FineTuneConfig {
    pub fn classification(num_labels: usize) -> Self {
        FineTuneConfig {
            task: TaskKind::Classification { num_labels },
            lambda: 1.0,
            epochs: 3,
            batch_size: 32,
            adam: AdamHyper {
                peak_lr: 2e-5,
                warmup_steps: 0,
                max_steps: u64::MAX,
                weight_decay: 0.01,
                ..AdamHyper::default()
            },
            seed: 0,
        }
    }

    pub fn span() -> Self {
        FineTuneConfig { task: TaskKind::Span, ..Self::classification(2) }
    }
}

/// Dev-set result of a fine-tuning run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DevMetrics {
    Classification { correct: usize, total: usize },
    Span { exact: usize, f1_sum: f64, total: usize },
}

impl DevMetrics {
    pub fn accuracy(&self) -> f64 {
        match self {
            DevMetrics::Classification { correct, total } => *correct as f64 / (*total).max(1) as f64,
            DevMetrics::Span { exact, total, .. } => *exact as f64 / (*total).max(1) as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        match self {
            DevMetrics::Classification { .. } => self.accuracy(),
            DevMetrics::Span { f1_sum, total, .. } => f1_sum / (*total).max(1) as f64,
        }
    }
}

fn validate_data(data: &TaskData, cfg: &FineTuneConfig) -> Result<(), FinetuneError> {
    match (data, cfg.task) {
        (TaskData::Classification(examples), TaskKind::Classification { num_labels }) => {
            for (index, e) in examples.iter().enumerate() {
                if e.label >= num_labels {
                    return Err(FinetuneError::LabelOutOfRange {
                        index,
                        label: e.label,
                        num_labels,
                    });
                }
            }
            Ok(())
        }
        (TaskData::Span(examples), TaskKind::Span) => {
            for (index, e) in examples.iter().enumerate() {
                let interior = e.pair.interior_fine();
                if e.start < 1 || e.end < e.start || e.end > interior {
                    return Err(FinetuneError::AnswerOutOfRange {
                        index,
                        start: e.start,
                        end: e.end,
                        interior,
                    });
                }
            }
            Ok(())
        }
        _ => Err(FinetuneError::EmptyDataset("task kind does not match data")),
    }
}

/// Fine-tunes a pre-trained model: fresh heads, full-model optimization of
/// the task loss, then a dev evaluation. Deterministic given the config
/// seed. Returns the tuned model and the dev metrics.
pub fn finetune_loop<T: Real>(
    mut model: Model<T>,
    train: &TaskData,
    dev: &TaskData,
    cfg: &FineTuneConfig,
) -> Result<(Model<T>, DevMetrics), FinetuneError> {
    if train.is_empty() {
        return Err(FinetuneError::EmptyDataset("train"));
    }
    if dev.is_empty() {
        return Err(FinetuneError::EmptyDataset("dev"));
    }
    validate_data(train, cfg)?;
    validate_data(dev, cfg)?;
    match cfg.task {
        TaskKind::Classification { num_labels } => {
            init_classifier_heads(&mut model, num_labels, cfg.seed)?;
        }
        TaskKind::Span => init_span_head(&mut model, cfg.seed)?,
    }
    let mut adam = AdamState::new(model.store());

    let n = train.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = rng_from_seed(sub_seed(cfg.seed, "epoch", epoch as u64));
        shuffle(&mut epoch_rng, &mut order);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.store_mut().zero_grads();
            let scale = real::<T>(1.0 / batch.len() as f64);
            for (slot, &idx) in batch.iter().enumerate() {
                let dropout_seed = sub_seed(
                    sub_seed(cfg.seed, "dropout", (epoch * 1_000_003 + batch_idx) as u64),
                    "slot",
                    slot as u64,
                );
                let mode = RunMode::train(dropout_seed);
                match (train, cfg.task) {
                    (TaskData::Classification(examples), TaskKind::Classification { .. }) => {
                        let e = &examples[idx];
                        let (output, trace) = model.forward(&e.pair, mode)?;
                        let (_, d_fine, d_coarse) = classification_loss_backward(
                            &mut model, &output, e.label, cfg.lambda, scale,
                        )?;
                        model.backward(&trace, Some(&d_fine), Some(&d_coarse))?;
                    }
                    (TaskData::Span(examples), TaskKind::Span) => {
                        let e = &examples[idx];
                        let (output, trace) = model.forward(&e.pair, mode)?;
                        let (_, d_fine, d_coarse) = span_loss_backward(
                            &mut model,
                            &output,
                            &e.pair,
                            (e.start, e.end),
                            scale,
                        )?;
                        model.backward(&trace, Some(&d_fine), Some(&d_coarse))?;
                    }
                    _ => unreachable!("validated above"),
                }
            }
            adam_step(model.store_mut(), &mut adam, &cfg.adam)?;
        }
    }

    let metrics = evaluate(&model, dev)?;
    Ok((model, metrics))
}

/// Dev evaluation with the joint head (classification) or the dual-stream
/// span scorers.
pub fn evaluate<T: Real>(model: &Model<T>, data: &TaskData) -> Result<DevMetrics, FinetuneError> {
    match data {
        TaskData::Classification(examples) => {
            let heads = ClassifierHeads::resolve(model)?;
            let mut correct = 0;
            for e in examples {
                let (output, _) = model.forward(&e.pair, RunMode::eval())?;
                let mut joint_input: Vec<T> = Vec::new();
                joint_input.extend_from_slice(output.fine_cls());
                joint_input.extend_from_slice(output.coarse_cls());
                let logits = linear_logits(
                    &joint_input,
                    model.store().value(heads.joint_weight),
                    model.store().value(heads.joint_bias),
                );
                if crate::tensor::argmax(&logits) == e.label {
                    correct += 1;
                }
            }
            Ok(DevMetrics::Classification { correct, total: examples.len() })
        }
        TaskData::Span(examples) => {
            let mut exact = 0;
            let mut f1_sum = 0.0;
            for e in examples {
                let (output, _) = model.forward(&e.pair, RunMode::eval())?;
                let (start_logits, end_logits) = span_logits(model, &output, &e.pair, true)?;
                let (ps, pe) = best_span(&start_logits, &end_logits);
                if ps == e.start && pe == e.end {
                    exact += 1;
                }
                f1_sum += span_f1((ps, pe), (e.start, e.end));
            }
            Ok(DevMetrics::Span { exact, f1_sum, total: examples.len() })
        }
    }
}

/// Highest-scoring valid span: argmax start, then argmax end at or after it
/// (ties toward the lower index). Positions are 1-based interior indices.
pub fn best_span<T: Real>(start_logits: &[T], end_logits: &[T]) -> (usize, usize) {
    let s = crate::tensor::argmax(start_logits);
    let e_rel = crate::tensor::argmax(&end_logits[s..]);
    (s + 1, s + e_rel + 1)
}

/// Token-overlap F1 between two inclusive spans.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let overlap_start = pred.0.max(gold.0);
    let overlap_end = pred.1.min(gold.1);
    if overlap_end < overlap_start {
        return 0.0;
    }
    let overlap = (overlap_end - overlap_start + 1) as f64;
    let pred_len = (pred.1 - pred.0 + 1) as f64;
    let gold_len = (gold.1 - gold.0 + 1) as f64;
    let precision = overlap / pred_len;
    let recall = overlap / gold_len;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, StreamOutput, Variant};
    use alloc::vec;

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig {
            variant: Variant::Ambert,
            layers: 1,
            hidden: 8,
            heads: 2,
            head_size: 4,
            ffn_inner: 16,
            max_positions: 16,
            fine_vocab_size: 12,
            coarse_vocab_size: 9,
            hidden_dropout: 0.0,
            attention_dropout: 0.0,
            type_vocab: 2,
            granularity_embedding: true,
        };
        Model::init(cfg, 21).unwrap()
    }

    fn tiny_pair() -> TokenSeqPair {
        TokenSeqPair {
            fine_ids: vec![2, 5, 6, 7, 3],
            coarse_ids: vec![2, 5, 6, 3],
            alignment: vec![(1, 3), (3, 4)],
            fine_segments: vec![0; 5],
            coarse_segments: vec![0; 4],
        }
    }

    /// Builds a synthetic dual-stream output with chosen `[CLS]` rows.
    fn synthetic_output(rx: &[f64], rz: &[f64], fl: usize, cl: usize) -> ForwardOutput<f64> {
        let d = rx.len();
        let mut fine = Tensor::zeros(&[fl, d]);
        fine.row_mut(0).copy_from_slice(rx);
        let mut coarse = Tensor::zeros(&[cl, d]);
        coarse.row_mut(0).copy_from_slice(rz);
        ForwardOutput {
            fine: Some(StreamOutput { hidden: fine, attention: vec![] }),
            coarse: Some(StreamOutput { hidden: coarse, attention: vec![] }),
            joint_attention: vec![],
            fine_len: fl,
            coarse_len: cl,
            flops: 0,
        }
    }

    #[test]
    fn identical_heads_and_inputs_have_zero_agreement() {
        let mut model = tiny_model();
        let heads = init_classifier_heads(&mut model, 3, 5).unwrap();
        // Copy head_x into head_z and feed identical [CLS] vectors.
        let xw = model.store().value(heads.x_weight).clone();
        *model.store_mut().value_mut(heads.z_weight) = xw;
        let cls = vec![0.3f64, -0.7, 0.2, 0.9, -0.1, 0.0, 0.5, -0.4];
        let out = synthetic_output(&cls, &cls, 5, 4);
        let b = classification_loss(&model, &out, 1, 1.0).unwrap();
        assert_eq!(b.reg, 0.0);
        assert!((b.total - (b.ce_x + b.ce_z + b.ce_joint)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_total_is_sum_of_cross_entropies() {
        let mut model = tiny_model();
        init_classifier_heads(&mut model, 3, 5).unwrap();
        let pair = tiny_pair();
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        let b = classification_loss(&model, &out, 2, 0.0).unwrap();
        assert!((b.total - (b.ce_x + b.ce_z + b.ce_joint)).abs() < 1e-12);
        assert!(b.reg >= 0.0);
    }

    #[test]
    fn opposite_onehot_predictions_give_sqrt_two() {
        let mut model = tiny_model();
        let heads = init_classifier_heads(&mut model, 2, 5).unwrap();
        let d = model.config().hidden;
        // CLS = e_0; weights saturate the two heads in opposite directions.
        let mut xw = Tensor::zeros(&[d, 2]);
        xw.row_mut(0)[0] = 200.0;
        xw.row_mut(0)[1] = -200.0;
        let mut zw = Tensor::zeros(&[d, 2]);
        zw.row_mut(0)[0] = -200.0;
        zw.row_mut(0)[1] = 200.0;
        *model.store_mut().value_mut(heads.x_weight) = xw;
        *model.store_mut().value_mut(heads.z_weight) = zw;
        let mut cls = vec![0.0f64; d];
        cls[0] = 1.0;
        let out = synthetic_output(&cls, &cls, 4, 4);
        let lambda = 0.7;
        let b = classification_loss(&model, &out, 0, lambda).unwrap();
        assert!((b.reg - (2.0f64).sqrt()).abs() < 1e-9);
        assert!(
            (b.total - (b.ce_x + b.ce_z + b.ce_joint + lambda * b.reg)).abs() < 1e-12
        );
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut model = tiny_model();
        init_classifier_heads(&mut model, 2, 5).unwrap();
        let pair = tiny_pair();
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        assert!(matches!(
            classification_loss(&model, &out, 5, 1.0),
            Err(FinetuneError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cover_is_total_over_the_interior() {
        let pair = tiny_pair();
        for i in 1..=pair.interior_fine() {
            assert!(pair.cover(i).is_some(), "position {i} uncovered");
        }
        assert_eq!(pair.cover(1), Some(1));
        assert_eq!(pair.cover(2), Some(1));
        assert_eq!(pair.cover(3), Some(2));
    }

    #[test]
    fn forced_one_hot_scorers_drive_span_loss_to_zero() {
        let mut model = tiny_model();
        init_span_head(&mut model, 5).unwrap();
        let d = model.config().hidden;
        let pair = tiny_pair(); // interior 3
        // Orthogonal one-hot fine rows; zero coarse rows.
        let mut fine = Tensor::zeros(&[5, d]);
        for i in 1..=3 {
            fine.row_mut(i)[i] = 1.0;
        }
        let out = ForwardOutput {
            fine: Some(StreamOutput { hidden: fine, attention: vec![] }),
            coarse: Some(StreamOutput { hidden: Tensor::zeros(&[4, d]), attention: vec![] }),
            joint_attention: vec![],
            fine_len: 5,
            coarse_len: 4,
            flops: 0,
        };
        // Start scorer keyed to position 1's feature, end scorer to 2's.
        let sw = model.store().lookup(SPAN_START_WEIGHT).unwrap();
        let ew = model.store().lookup(SPAN_END_WEIGHT).unwrap();
        model.store_mut().value_mut(sw).fill(0.0);
        model.store_mut().value_mut(sw).data_mut()[1] = 200.0;
        model.store_mut().value_mut(ew).fill(0.0);
        model.store_mut().value_mut(ew).data_mut()[2] = 200.0;
        let loss = span_loss(&model, &out, &pair, (1, 2)).unwrap();
        assert!(loss < 1e-6, "one-hot scorers should cost ~0, got {loss}");
    }

    #[test]
    fn span_answer_out_of_range_rejected() {
        let mut model = tiny_model();
        init_span_head(&mut model, 5).unwrap();
        let pair = tiny_pair();
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        assert!(matches!(
            span_loss(&model, &out, &pair, (2, 9)),
            Err(FinetuneError::AnswerOutOfRange { .. })
        ));
    }

    #[test]
    fn span_f1_matches_hand_counts() {
        assert_eq!(span_f1((2, 4), (2, 4)), 1.0);
        assert_eq!(span_f1((1, 2), (4, 5)), 0.0);
        // Overlap 2 of pred-3 and gold-2: p = 2/3, r = 1 → F1 = 0.8.
        assert!((span_f1((2, 4), (3, 4)) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn argmax_prediction_invariant_to_logit_shift() {
        let logits = vec![0.2f64, 1.4, -0.3];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        assert_eq!(crate::tensor::argmax(&logits), crate::tensor::argmax(&shifted));
    }
}
