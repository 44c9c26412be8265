//! Span-consistent masking and the multi-grained MLM objective.
//!
//! Masking is sampled over coarse tokens (15% of the non-special interior,
//! rounded to nearest, at least one when anything is maskable) and projected
//! down: every fine token covered by a selected coarse token is selected
//! too, inheriting the coarse token's 80/10/10 mask/random/keep action.
//! The loss is the sum of both streams' cross entropies over selected
//! positions; each stream's logits come from its own tied output head
//! (hidden · token-tableᵀ + bias).

use alloc::vec::Vec;
use core::fmt;

use crate::model::{ForwardOutput, Model, ModelError, RunMode, Stream, Variant};
use crate::ops::cross_entropy;
use crate::optim::{adam_step, AdamHyper, AdamState, OptimError};
use crate::params::SlotId;
use crate::rng::{rng_from_seed, shuffle, sub_seed, uniform, uniform_index};
use crate::tensor::{real, Real, Tensor};
use crate::tokenizer::TokenSeqPair;
use crate::vocab::{Vocabulary, MASK_ID, NUM_SPECIALS};

/// What happens to a selected position. All three still contribute to the
/// loss; only the visible input differs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    /// Replace with `[MASK]`.
    MaskToken,
    /// Replace with this random non-special id from the matching stream.
    Random(u32),
    /// Leave the original token in place.
    Keep,
}

/// One selected position with its original id (the prediction target).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedPosition {
    pub position: usize,
    pub original: u32,
    pub action: MaskAction,
}

/// Which positions of each stream are selected and how they are rewritten.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub seed: u64,
    pub coarse: Vec<MaskedPosition>,
    pub fine: Vec<MaskedPosition>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.coarse.is_empty() && self.fine.is_empty()
    }

    /// Indicator over coarse positions (`n_j`).
    pub fn coarse_flags(&self, len: usize) -> Vec<bool> {
        let mut flags = alloc::vec![false; len];
        for m in &self.coarse {
            flags[m.position] = true;
        }
        flags
    }

    /// Indicator over fine positions (`m_i`).
    pub fn fine_flags(&self, len: usize) -> Vec<bool> {
        let mut flags = alloc::vec![false; len];
        for m in &self.fine {
            flags[m.position] = true;
        }
        flags
    }

    /// Rewrites a pair into its masked form (the encoder input).
    pub fn apply(&self, pair: &TokenSeqPair) -> TokenSeqPair {
        let mut masked = pair.clone();
        for m in &self.coarse {
            masked.coarse_ids[m.position] = match m.action {
                MaskAction::MaskToken => MASK_ID,
                MaskAction::Random(id) => id,
                MaskAction::Keep => m.original,
            };
        }
        for m in &self.fine {
            masked.fine_ids[m.position] = match m.action {
                MaskAction::MaskToken => MASK_ID,
                MaskAction::Random(id) => id,
                MaskAction::Keep => m.original,
            };
        }
        masked
    }
}

fn draw_action(rng: &mut rand_chacha::ChaCha8Rng) -> (f64, f64) {
    (uniform::<f64>(rng), uniform::<f64>(rng))
}

fn action_kind(u: f64) -> u8 {
    if u < 0.8 {
        0
    } else if u < 0.9 {
        1
    } else {
        2
    }
}

fn random_nonspecial(rng: &mut rand_chacha::ChaCha8Rng, vocab_size: usize) -> u32 {
    (NUM_SPECIALS + uniform_index(rng, vocab_size - NUM_SPECIALS)) as u32
}

/// Samples a mask plan for `pair`, deterministic in `seed`.
///
/// Selection: coarse interior positions with non-special ids, sampled
/// without replacement to `max(1, round(rate·count))` (zero when `rate` is
/// zero or nothing is maskable). Every selected coarse token's covered fine
/// positions are selected with the same action kind; random replacements
/// draw per position from the matching stream's non-special ids.
pub fn make_mask_plan(
    pair: &TokenSeqPair,
    rate: f64,
    fine_vocab_size: usize,
    coarse_vocab_size: usize,
    seed: u64,
) -> MaskPlan {
    let mut rng = rng_from_seed(seed);
    let cl = pair.coarse_ids.len();
    let mut candidates: Vec<usize> = (1..cl.saturating_sub(1))
        .filter(|&p| !Vocabulary::is_special(pair.coarse_ids[p]))
        .collect();
    let budget = if rate == 0.0 || candidates.is_empty() {
        0
    } else {
        let rounded = num_traits::Float::round(rate * candidates.len() as f64) as usize;
        rounded.max(1).min(candidates.len())
    };
    shuffle(&mut rng, &mut candidates);
    let mut chosen: Vec<usize> = candidates.into_iter().take(budget).collect();
    chosen.sort_unstable();

    let mut coarse = Vec::with_capacity(chosen.len());
    let mut fine = Vec::new();
    for position in chosen {
        let (u, _) = draw_action(&mut rng);
        let kind = action_kind(u);
        let coarse_action = match kind {
            0 => MaskAction::MaskToken,
            1 => MaskAction::Random(random_nonspecial(&mut rng, coarse_vocab_size)),
            _ => MaskAction::Keep,
        };
        coarse.push(MaskedPosition {
            position,
            original: pair.coarse_ids[position],
            action: coarse_action,
        });
        let (start, end) = pair.alignment[position - 1];
        for fp in start..end {
            let action = match kind {
                0 => MaskAction::MaskToken,
                1 => MaskAction::Random(random_nonspecial(&mut rng, fine_vocab_size)),
                _ => MaskAction::Keep,
            };
            fine.push(MaskedPosition {
                position: fp as usize,
                original: pair.fine_ids[fp as usize],
                action,
            });
        }
    }
    MaskPlan { seed, coarse, fine }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PretrainError {
    /// Plan points at positions outside the forward output.
    PlanMismatch { stream: &'static str, position: usize, len: usize },
    /// NSP label outside {0, 1}.
    BadNspLabel(u32),
    /// NSP head slots missing (trainer built without the NSP flag).
    NspHeadMissing,
    Model(ModelError),
    Optim(OptimError),
}

impl fmt::Display for PretrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PretrainError::PlanMismatch { stream, position, len } => {
                write!(f, "mask plan position {position} outside {stream} output of length {len}")
            }
            PretrainError::BadNspLabel(l) => write!(f, "NSP label {l} outside {{0, 1}}"),
            PretrainError::NspHeadMissing => write!(f, "NSP head not registered"),
            PretrainError::Model(e) => write!(f, "{e}"),
            PretrainError::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for PretrainError {}

impl From<ModelError> for PretrainError {
    fn from(e: ModelError) -> Self {
        PretrainError::Model(e)
    }
}

impl From<OptimError> for PretrainError {
    fn from(e: OptimError) -> Self {
        PretrainError::Optim(e)
    }
}

/// MLM loss split by stream. `total` is exactly `fine_term + coarse_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub fine_term: T,
    pub coarse_term: T,
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn zero() -> Self {
        LossBreakdown { fine_term: T::zero(), coarse_term: T::zero(), total: T::zero() }
    }
}

fn stream_mlm<T: Real>(
    model: &Model<T>,
    hidden: &Tensor<T>,
    masked: &[MaskedPosition],
    stream: Stream,
    scale: Option<T>,
    d_hidden: Option<&mut Tensor<T>>,
    grads: Option<(&mut Tensor<T>, &mut Tensor<T>)>,
) -> Result<T, PretrainError> {
    let slots = model.stream_slots(stream);
    let table = model.store().value(slots.token).clone();
    let bias = model.store().value(slots.mlm_bias).clone();
    let v = table.rows();
    let mut loss_sum = T::zero();
    let mut d_hidden = d_hidden;
    let mut grads = grads;
    for m in masked {
        if m.position >= hidden.rows() {
            return Err(PretrainError::PlanMismatch {
                stream: stream.as_str(),
                position: m.position,
                len: hidden.rows(),
            });
        }
        let h = hidden.row(m.position);
        let mut logits = Vec::with_capacity(v);
        for row in 0..v {
            logits.push(crate::tensor::dot(h, table.row(row)) + bias.data()[row]);
        }
        let s = scale.unwrap_or_else(T::one);
        let (loss, dlogits) = cross_entropy(&logits, m.original as usize, s);
        loss_sum = loss_sum + loss;
        if let Some(d_hidden) = d_hidden.as_deref_mut() {
            let dh = d_hidden.row_mut(m.position);
            for (row, &dl) in dlogits.iter().enumerate() {
                let e_row = table.row(row);
                for (a, &e) in dh.iter_mut().zip(e_row) {
                    *a = *a + dl * e;
                }
            }
        }
        if let Some((dtable, dbias)) = grads.as_mut() {
            for (row, &dl) in dlogits.iter().enumerate() {
                let g_row = dtable.row_mut(row);
                for (g, &hv) in g_row.iter_mut().zip(h) {
                    *g = *g + dl * hv;
                }
                dbias.data_mut()[row] = dbias.data_mut()[row] + dl;
            }
        }
    }
    Ok(loss_sum)
}

/// Cross entropy summed over the plan's selected positions, per stream.
/// Pure evaluation: no gradients are produced.
pub fn mlm_loss<T: Real>(
    model: &Model<T>,
    output: &ForwardOutput<T>,
    plan: &MaskPlan,
) -> Result<LossBreakdown<T>, PretrainError> {
    let fine_term =
        stream_mlm(model, output.fine_hidden(), &plan.fine, Stream::Fine, None, None, None)?;
    let coarse_term = stream_mlm(
        model,
        output.coarse_hidden(),
        &plan.coarse,
        Stream::Coarse,
        None,
        None,
        None,
    )?;
    Ok(LossBreakdown { fine_term, coarse_term, total: fine_term + coarse_term })
}

/// Loss plus gradients: head gradients (tied token table and bias) are
/// accumulated into the store; the returned tensors are the hidden-state
/// gradients to feed into [`Model::backward`]. `scale` multiplies every
/// gradient (use `1/N` for a mean over masked positions).
pub fn mlm_loss_backward<T: Real>(
    model: &mut Model<T>,
    output: &ForwardOutput<T>,
    plan: &MaskPlan,
    scale: T,
) -> Result<(LossBreakdown<T>, Tensor<T>, Tensor<T>), PretrainError> {
    let mut d_fine = Tensor::zeros(output.fine_hidden().shape());
    let mut d_coarse = Tensor::zeros(output.coarse_hidden().shape());

    let mut fine_term = T::zero();
    let mut coarse_term = T::zero();
    for stream in [Stream::Fine, Stream::Coarse] {
        let (hidden, masked, d_hidden) = match stream {
            Stream::Fine => (output.fine_hidden(), &plan.fine, &mut d_fine),
            Stream::Coarse => (output.coarse_hidden(), &plan.coarse, &mut d_coarse),
        };
        let slots = model.stream_slots(stream).clone();
        let mut dtable = Tensor::zeros(model.store().value(slots.token).shape());
        let mut dbias = Tensor::zeros(model.store().value(slots.mlm_bias).shape());
        let loss = stream_mlm(
            model,
            hidden,
            masked,
            stream,
            Some(scale),
            Some(d_hidden),
            Some((&mut dtable, &mut dbias)),
        )?;
        model.store_mut().accumulate_grad(slots.token, &dtable);
        model.store_mut().accumulate_grad(slots.mlm_bias, &dbias);
        match stream {
            Stream::Fine => fine_term = loss,
            Stream::Coarse => coarse_term = loss,
        }
    }
    Ok((
        LossBreakdown { fine_term, coarse_term, total: fine_term + coarse_term },
        d_fine,
        d_coarse,
    ))
}

/// Name of the NSP head weight over `[r_x0, r_z0]`.
pub const NSP_WEIGHT: &str = "nsp.weight";
pub const NSP_BIAS: &str = "nsp.bias";

/// Registers the NSP head (fresh zeros) if absent.
pub fn ensure_nsp_head<T: Real>(model: &mut Model<T>) -> Result<(SlotId, SlotId), PretrainError> {
    let d = model.config().hidden;
    if !model.store().contains(NSP_WEIGHT) {
        let w = Tensor::zeros(&[2 * d]);
        let b = Tensor::zeros(&[1]);
        model.store_mut().register(NSP_WEIGHT, w).expect("fresh name");
        model.store_mut().register(NSP_BIAS, b).expect("fresh name");
    }
    let w = model.store().lookup(NSP_WEIGHT).map_err(|_| PretrainError::NspHeadMissing)?;
    let b = model.store().lookup(NSP_BIAS).map_err(|_| PretrainError::NspHeadMissing)?;
    Ok((w, b))
}

/// Binary cross entropy of the next-sentence head on `[r_x0, r_z0]`.
pub fn nsp_loss<T: Real>(
    model: &Model<T>,
    output: &ForwardOutput<T>,
    label: u32,
) -> Result<T, PretrainError> {
    let (loss, _) = nsp_forward(model, output, label)?;
    Ok(loss)
}

fn nsp_forward<T: Real>(
    model: &Model<T>,
    output: &ForwardOutput<T>,
    label: u32,
) -> Result<(T, T), PretrainError> {
    if label > 1 {
        return Err(PretrainError::BadNspLabel(label));
    }
    let w = model.store().lookup(NSP_WEIGHT).map_err(|_| PretrainError::NspHeadMissing)?;
    let b = model.store().lookup(NSP_BIAS).map_err(|_| PretrainError::NspHeadMissing)?;
    let weight = model.store().value(w);
    let d = model.config().hidden;
    let fine_cls = output.fine_cls();
    let coarse_cls = output.coarse_cls();
    let mut logit = model.store().value(b).data()[0];
    for (j, &x) in fine_cls.iter().enumerate() {
        logit = logit + weight.data()[j] * x;
    }
    for (j, &x) in coarse_cls.iter().enumerate() {
        logit = logit + weight.data()[d + j] * x;
    }
    // Stable BCE-with-logit: max(z,0) − z·y + ln(1 + e^{−|z|}).
    let y = real::<T>(label as f64);
    let zero = T::zero();
    let loss = logit.max(zero) - logit * y + (T::one() + (-logit.abs()).exp()).ln();
    let p = T::one() / (T::one() + (-logit).exp());
    Ok((loss, p - y))
}

/// NSP loss and gradients: head gradients accumulate into the store, the
/// returned vectors are the gradients on the two `[CLS]` rows.
pub fn nsp_loss_backward<T: Real>(
    model: &mut Model<T>,
    output: &ForwardOutput<T>,
    label: u32,
    scale: T,
) -> Result<(T, Vec<T>, Vec<T>), PretrainError> {
    let (loss, dlogit_raw) = nsp_forward(model, output, label)?;
    let dlogit = dlogit_raw * scale;
    let w = model.store().lookup(NSP_WEIGHT).map_err(|_| PretrainError::NspHeadMissing)?;
    let b = model.store().lookup(NSP_BIAS).map_err(|_| PretrainError::NspHeadMissing)?;
    let d = model.config().hidden;
    let weight = model.store().value(w).clone();
    let fine_cls: Vec<T> = output.fine_cls().to_vec();
    let coarse_cls: Vec<T> = output.coarse_cls().to_vec();

    let mut dw = Tensor::zeros(&[2 * d]);
    for (j, &x) in fine_cls.iter().enumerate() {
        dw.data_mut()[j] = dlogit * x;
    }
    for (j, &x) in coarse_cls.iter().enumerate() {
        dw.data_mut()[d + j] = dlogit * x;
    }
    model.store_mut().accumulate_grad(w, &dw);
    let mut db = Tensor::zeros(&[1]);
    db.data_mut()[0] = dlogit;
    model.store_mut().accumulate_grad(b, &db);

    let d_fine: Vec<T> = (0..d).map(|j| dlogit * weight.data()[j]).collect();
    let d_coarse: Vec<T> = (0..d).map(|j| dlogit * weight.data()[d + j]).collect();
    Ok((loss, d_fine, d_coarse))
}

/// One pre-training example: an encoded pair, plus the NSP label when the
/// optional objective is on.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub pair: TokenSeqPair,
    pub nsp_label: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainHyper {
    pub adam: AdamHyper,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub nsp: bool,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            adam: AdamHyper::default(),
            batch_size: 8,
            mask_rate: 0.15,
            nsp: false,
        }
    }
}

/// Metrics of one optimizer step. The three loss fields are normalized by
/// the batch's total number of selected positions, so
/// `total = fine_term + coarse_term` is the mean cross entropy per
/// selected token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub fine_term: f64,
    pub coarse_term: f64,
    pub total: f64,
    pub nsp_term: Option<f64>,
    pub masked_fine: usize,
    pub masked_coarse: usize,
}

/// Deterministic step-wise pre-trainer. Every random draw of step `t`
/// derives from `(seed, t)` alone, so a run resumed from any checkpoint
/// reproduces the original step sequence bitwise.
pub struct Trainer<T> {
    model: Model<T>,
    adam: AdamState<T>,
    hyper: PretrainHyper,
    examples: Vec<TrainExample>,
    seed: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        mut model: Model<T>,
        hyper: PretrainHyper,
        examples: Vec<TrainExample>,
        seed: u64,
    ) -> Result<Self, PretrainError> {
        assert!(!examples.is_empty(), "trainer needs at least one example");
        assert!(hyper.batch_size > 0, "batch size must be positive");
        if hyper.nsp {
            ensure_nsp_head(&mut model)?;
        }
        let adam = AdamState::new(model.store());
        Ok(Trainer { model, adam, hyper, examples, seed })
    }

    /// Reassembles a trainer from checkpointed parts.
    pub fn from_parts(
        model: Model<T>,
        adam: AdamState<T>,
        hyper: PretrainHyper,
        examples: Vec<TrainExample>,
        seed: u64,
    ) -> Self {
        Trainer { model, adam, hyper, examples, seed }
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn adam_state(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyper(&self) -> &PretrainHyper {
        &self.hyper
    }

    pub fn into_parts(self) -> (Model<T>, AdamState<T>) {
        (self.model, self.adam)
    }

    /// Runs one step: sample a batch, mask, forward, backward, Adam update.
    pub fn step(&mut self) -> Result<StepStats, PretrainError> {
        let t = self.adam.step() + 1;
        let mut batch_rng = rng_from_seed(sub_seed(self.seed, "batch", t));
        let batch: Vec<usize> = (0..self.hyper.batch_size)
            .map(|_| uniform_index(&mut batch_rng, self.examples.len()))
            .collect();

        // Plans first, so gradient scaling by the batch-wide masked count
        // is known before any backward pass runs.
        let mask_seed_base = sub_seed(self.seed, "mask", t);
        let plans: Vec<MaskPlan> = batch
            .iter()
            .enumerate()
            .map(|(slot, &idx)| {
                make_mask_plan(
                    &self.examples[idx].pair,
                    self.hyper.mask_rate,
                    self.model.config().fine_vocab_size,
                    self.model.config().coarse_vocab_size,
                    sub_seed(mask_seed_base, "slot", slot as u64),
                )
            })
            .collect();
        let masked_fine: usize = plans.iter().map(|p| p.fine.len()).sum();
        let masked_coarse: usize = plans.iter().map(|p| p.coarse.len()).sum();
        let n_masked = masked_fine + masked_coarse;
        let scale = if n_masked == 0 { T::zero() } else { real::<T>(1.0 / n_masked as f64) };
        let nsp_scale = real::<T>(1.0 / self.hyper.batch_size as f64);

        self.model.store_mut().zero_grads();
        let mut fine_sum = T::zero();
        let mut coarse_sum = T::zero();
        let mut nsp_sum = T::zero();
        let mut nsp_count = 0usize;
        let dropout_base = sub_seed(self.seed, "dropout", t);
        for (slot, (&idx, plan)) in batch.iter().zip(plans.iter()).enumerate() {
            let example = &self.examples[idx];
            let masked = plan.apply(&example.pair);
            let mode = RunMode::train(sub_seed(dropout_base, "slot", slot as u64));
            let (output, trace) = self.model.forward(&masked, mode)?;
            let (breakdown, mut d_fine, mut d_coarse) =
                mlm_loss_backward(&mut self.model, &output, plan, scale)?;
            fine_sum = fine_sum + breakdown.fine_term;
            coarse_sum = coarse_sum + breakdown.coarse_term;
            if self.hyper.nsp {
                if let Some(label) = example.nsp_label {
                    let (loss, d_f_cls, d_c_cls) =
                        nsp_loss_backward(&mut self.model, &output, label, nsp_scale)?;
                    nsp_sum = nsp_sum + loss;
                    nsp_count += 1;
                    for (a, &g) in d_fine.row_mut(0).iter_mut().zip(&d_f_cls) {
                        *a = *a + g;
                    }
                    for (a, &g) in d_coarse.row_mut(0).iter_mut().zip(&d_c_cls) {
                        *a = *a + g;
                    }
                }
            }
            self.model.backward(&trace, Some(&d_fine), Some(&d_coarse))?;
        }

        self.adam.extend_for(self.model.store());
        let lr = adam_step(self.model.store_mut(), &mut self.adam, &self.hyper.adam)?;

        let norm = if n_masked == 0 { 1.0 } else { n_masked as f64 };
        Ok(StepStats {
            step: t,
            lr,
            fine_term: fine_sum.to_f64() / norm,
            coarse_term: coarse_sum.to_f64() / norm,
            total: (fine_sum + coarse_sum).to_f64() / norm,
            nsp_term: if nsp_count > 0 { Some(nsp_sum.to_f64() / nsp_count as f64) } else { None },
            masked_fine,
            masked_coarse,
        })
    }
}

/// Masked-token top-1 accuracy per stream, evaluated without dropout over
/// freshly sampled plans. Returns `(fine_correct, fine_total, coarse_correct,
/// coarse_total)`.
pub fn masked_accuracy<T: Real>(
    model: &Model<T>,
    examples: &[TrainExample],
    rate: f64,
    seed: u64,
) -> Result<(usize, usize, usize, usize), PretrainError> {
    let mut fine_correct = 0;
    let mut fine_total = 0;
    let mut coarse_correct = 0;
    let mut coarse_total = 0;
    for (i, example) in examples.iter().enumerate() {
        let plan = make_mask_plan(
            &example.pair,
            rate,
            model.config().fine_vocab_size,
            model.config().coarse_vocab_size,
            sub_seed(seed, "eval-mask", i as u64),
        );
        if plan.is_empty() {
            continue;
        }
        let masked = plan.apply(&example.pair);
        let (output, _) = model.forward(&masked, RunMode::eval())?;
        for stream in [Stream::Fine, Stream::Coarse] {
            let (hidden, selected) = match stream {
                Stream::Fine => (output.fine_hidden(), &plan.fine),
                Stream::Coarse => (output.coarse_hidden(), &plan.coarse),
            };
            let slots = model.stream_slots(stream);
            let table = model.store().value(slots.token);
            let bias = model.store().value(slots.mlm_bias);
            for m in selected {
                let h = hidden.row(m.position);
                let mut best = 0usize;
                let mut best_v = T::neg_infinity();
                for row in 0..table.rows() {
                    let v = crate::tensor::dot(h, table.row(row)) + bias.data()[row];
                    if v > best_v {
                        best_v = v;
                        best = row;
                    }
                }
                let hit = best == m.original as usize;
                match stream {
                    Stream::Fine => {
                        fine_total += 1;
                        fine_correct += hit as usize;
                    }
                    Stream::Coarse => {
                        coarse_total += 1;
                        coarse_correct += hit as usize;
                    }
                }
            }
        }
    }
    Ok((fine_correct, fine_total, coarse_correct, coarse_total))
}

/// Whether this variant conditions each stream's MLM head on both inputs.
pub fn streams_interact(variant: Variant) -> bool {
    variant == Variant::Hybrid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;

    fn pair_with_coarse(n_interior: usize) -> TokenSeqPair {
        // One fine token per coarse token.
        let mut fine_ids = vec![2u32];
        let mut coarse_ids = vec![2u32];
        let mut alignment = Vec::new();
        for i in 0..n_interior {
            fine_ids.push(5 + i as u32);
            coarse_ids.push(5 + i as u32);
            alignment.push((1 + i as u32, 2 + i as u32));
        }
        fine_ids.push(3);
        coarse_ids.push(3);
        let fl = fine_ids.len();
        let cl = coarse_ids.len();
        TokenSeqPair {
            fine_ids,
            coarse_ids,
            alignment,
            fine_segments: vec![0; fl],
            coarse_segments: vec![0; cl],
        }
    }

    #[test]
    fn budget_is_fifteen_percent_rounded() {
        let pair = pair_with_coarse(20);
        let plan = make_mask_plan(&pair, 0.15, 100, 100, 7);
        assert_eq!(plan.coarse.len(), 3);
    }

    #[test]
    fn empty_interior_gives_empty_plan() {
        let pair = pair_with_coarse(0);
        let plan = make_mask_plan(&pair, 0.15, 100, 100, 7);
        assert!(plan.is_empty());
    }

    #[test]
    fn rate_zero_masks_nothing() {
        let pair = pair_with_coarse(20);
        let plan = make_mask_plan(&pair, 0.0, 100, 100, 7);
        assert!(plan.is_empty());
    }

    #[test]
    fn minimum_one_when_nonempty() {
        let pair = pair_with_coarse(2);
        let plan = make_mask_plan(&pair, 0.15, 100, 100, 7);
        assert_eq!(plan.coarse.len(), 1);
    }

    #[test]
    fn projection_masks_covered_fine_span() {
        // Last coarse token covers fine range [4, 7).
        let pair = TokenSeqPair {
            fine_ids: vec![2, 5, 6, 7, 8, 9, 10, 3],
            coarse_ids: vec![2, 5, 6, 7, 8, 3],
            alignment: vec![(1, 2), (2, 3), (3, 4), (4, 7)],
            fine_segments: vec![0; 8],
            coarse_segments: vec![0; 6],
        };
        pair.validate().unwrap();
        // Mask rate 1.0 selects every candidate; the last coarse token must
        // drag fine positions 4, 5, 6 along.
        let plan = make_mask_plan(&pair, 1.0, 100, 100, 3);
        let flags = plan.fine_flags(pair.fine_ids.len());
        assert!(flags[4] && flags[5] && flags[6]);
        // Action kinds match between a coarse token and its span.
        for c in &plan.coarse {
            let (start, end) = pair.alignment[c.position - 1];
            for f in plan.fine.iter().filter(|f| (f.position as u32) >= start && (f.position as u32) < end) {
                let same = matches!(
                    (c.action, f.action),
                    (MaskAction::MaskToken, MaskAction::MaskToken)
                        | (MaskAction::Random(_), MaskAction::Random(_))
                        | (MaskAction::Keep, MaskAction::Keep)
                );
                assert!(same, "fine action kind must inherit from the coarse token");
            }
        }
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let pair = pair_with_coarse(12);
        let a = make_mask_plan(&pair, 0.15, 50, 50, 99);
        let b = make_mask_plan(&pair, 0.15, 50, 50, 99);
        assert_eq!(a, b);
        let c = make_mask_plan(&pair, 0.15, 50, 50, 100);
        assert_ne!(a, c);
    }

    fn tiny_model(variant: crate::model::Variant) -> Model<f64> {
        let cfg = ModelConfig {
            variant,
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
        Model::init(cfg, 11).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_v_per_position() {
        let mut model = tiny_model(crate::model::Variant::Ambert);
        // Zero the fine head: logits become uniform regardless of hidden.
        let table = model.store().lookup("fine.token_embedding").unwrap();
        model.store_mut().value_mut(table).fill(0.0);
        let pair = pair_with_coarse(3);
        let plan = MaskPlan {
            seed: 0,
            coarse: vec![],
            fine: vec![MaskedPosition { position: 1, original: 5, action: MaskAction::MaskToken }],
        };
        let (out, _) = model.forward(&plan.apply(&pair), RunMode::eval()).unwrap();
        let breakdown = mlm_loss(&model, &out, &plan).unwrap();
        assert!((breakdown.fine_term - (12f64).ln()).abs() < 1e-9);
        assert_eq!(breakdown.coarse_term, 0.0);
    }

    #[test]
    fn empty_plan_costs_nothing() {
        let model = tiny_model(crate::model::Variant::Ambert);
        let pair = pair_with_coarse(3);
        let plan = MaskPlan { seed: 0, coarse: vec![], fine: vec![] };
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        let breakdown = mlm_loss(&model, &out, &plan).unwrap();
        assert_eq!(breakdown.total, 0.0);
    }

    #[test]
    fn total_is_exact_sum_of_streams() {
        let model = tiny_model(crate::model::Variant::Ambert);
        let pair = pair_with_coarse(4);
        let plan = make_mask_plan(&pair, 0.5, 12, 9, 3);
        let (out, _) = model.forward(&plan.apply(&pair), RunMode::eval()).unwrap();
        let b = mlm_loss(&model, &out, &plan).unwrap();
        assert_eq!(b.total, b.fine_term + b.coarse_term);
        assert!(b.total > 0.0);
    }

    #[test]
    fn nsp_uniform_head_costs_ln_two() {
        let mut model = tiny_model(crate::model::Variant::Ambert);
        ensure_nsp_head(&mut model).unwrap();
        let pair = pair_with_coarse(2);
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        // Zero head → logit 0 → probability one half.
        let loss = nsp_loss(&model, &out, 1).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            nsp_loss(&model, &out, 2),
            Err(PretrainError::BadNspLabel(2))
        ));
    }

    #[test]
    fn nsp_saturated_head_costs_nothing() {
        let mut model = tiny_model(crate::model::Variant::Ambert);
        let (w, _) = ensure_nsp_head(&mut model).unwrap();
        let pair = pair_with_coarse(2);
        // Point the head along the actual [CLS] features so the logit is
        // large and positive.
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        let d = model.config().hidden;
        let mut direction = vec![0.0f64; 2 * d];
        for (j, &x) in out.fine_cls().iter().enumerate() {
            direction[j] = 1e4 * x;
        }
        for (j, &x) in out.coarse_cls().iter().enumerate() {
            direction[d + j] = 1e4 * x;
        }
        model
            .store_mut()
            .value_mut(w)
            .data_mut()
            .copy_from_slice(&direction);
        let (out, _) = model.forward(&pair, RunMode::eval()).unwrap();
        let loss = nsp_loss(&model, &out, 1).unwrap();
        assert!(loss < 1e-6, "saturated correct logit should cost ~0, got {loss}");
    }
}
