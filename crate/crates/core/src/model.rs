//! The dual-granularity transformer in its three variants.
//!
//! - `ambert`: two encoder streams over the fine and coarse token sequences;
//!   every layer parameter, the position table, the segment table, and the
//!   embedding layer norm are one storage shared by both streams. Each
//!   stream keeps its own token embedding table and tied MLM output bias.
//! - `combo`: the same two streams with fully disjoint parameters.
//! - `hybrid`: a single encoder over the concatenated fine+coarse sequence;
//!   positions restart at the coarse sub-sequence and an optional
//!   2-entry granularity embedding lets the model tell the streams apart.
//!
//! Encoder blocks are post-layer-norm, as in the original BERT. The forward
//! pass records everything the hand-written backward pass needs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use rand_chacha::ChaCha8Rng;

use crate::ops::{
    add_bias, add_bias_backward, dropout, dropout_backward, embedding_lookup,
    embedding_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, matmul,
    matmul_nt, matmul_tn, softmax_backward, softmax_rows, DropoutMask, LayerNormCache,
    OpError,
};
use crate::params::{register_const, register_normal, ParamError, ParamStore, SlotId};
use crate::rng::{rng_from_seed, sub_seed};
use crate::tensor::{real, Real, Tensor};
use crate::tokenizer::TokenSeqPair;
use crate::vocab::{NUM_SPECIALS, PAD_ID};

/// Weight initialization: truncated normal with this std.
pub const INIT_STD: f64 = 0.02;

/// Additive attention bias for padding columns.
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ambert,
    Combo,
    Hybrid,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ambert => "ambert",
            Variant::Combo => "combo",
            Variant::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "ambert" => Some(Variant::Ambert),
            "combo" => Some(Variant::Combo),
            "hybrid" => Some(Variant::Hybrid),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One encoder stream, or the joint hybrid sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Fine,
    Coarse,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Fine => "fine",
            Stream::Coarse => "coarse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_size: usize,
    pub ffn_inner: usize,
    pub max_positions: usize,
    pub fine_vocab_size: usize,
    pub coarse_vocab_size: usize,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub type_vocab: usize,
    pub granularity_embedding: bool,
}

impl ModelConfig {
    /// Base-model hyperparameters (12×768, 12 heads, 3072 FFN, 512 positions).
    pub fn base(variant: Variant, fine_vocab_size: usize, coarse_vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            layers: 12,
            hidden: 768,
            heads: 12,
            head_size: 64,
            ffn_inner: 3072,
            max_positions: 512,
            fine_vocab_size,
            coarse_vocab_size,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            type_vocab: 2,
            granularity_embedding: true,
        }
    }

    /// Desk-scale preset for tests and smoke runs.
    pub fn desk(variant: Variant, fine_vocab_size: usize, coarse_vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            layers: 2,
            hidden: 64,
            heads: 4,
            head_size: 16,
            ffn_inner: 256,
            max_positions: 128,
            fine_vocab_size,
            coarse_vocab_size,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            type_vocab: 2,
            granularity_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden != self.heads * self.head_size {
            return Err(ModelError::InvalidConfig(format!(
                "hidden {} must equal heads {} × head_size {}",
                self.hidden, self.heads, self.head_size
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.ffn_inner == 0 || self.heads == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if self.max_positions < 3 {
            return Err(ModelError::InvalidConfig("max_positions below 3".into()));
        }
        if self.fine_vocab_size <= NUM_SPECIALS {
            return Err(ModelError::VocabTooSmall(self.fine_vocab_size));
        }
        if self.coarse_vocab_size <= NUM_SPECIALS {
            return Err(ModelError::VocabTooSmall(self.coarse_vocab_size));
        }
        if self.type_vocab == 0 {
            return Err(ModelError::InvalidConfig("type_vocab must be positive".into()));
        }
        for (name, rate) in
            [("dropout", self.hidden_dropout), ("attention_dropout", self.attention_dropout)]
        {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::InvalidConfig(format!("{name} {rate} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    InvalidConfig(String),
    VocabTooSmall(usize),
    TokenOutOfRange { stream: &'static str, position: usize, id: u32, vocab: usize },
    SequenceTooLong { stream: &'static str, len: usize, max: usize },
    /// Operation rejected for this variant (e.g. single-stream hybrid).
    VariantMismatch(String),
    Op(OpError),
    Param(ParamError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::VocabTooSmall(n) => {
                write!(f, "vocabulary size {n} leaves no room beyond the special tokens")
            }
            ModelError::TokenOutOfRange { stream, position, id, vocab } => write!(
                f,
                "{stream} stream: token id {id} at position {position} outside vocabulary of size {vocab}"
            ),
            ModelError::SequenceTooLong { stream, len, max } => {
                write!(f, "{stream} sequence length {len} exceeds max positions {max}")
            }
            ModelError::VariantMismatch(msg) => write!(f, "{msg}"),
            ModelError::Op(e) => write!(f, "{e}"),
            ModelError::Param(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<OpError> for ModelError {
    fn from(e: OpError) -> Self {
        ModelError::Op(e)
    }
}

impl From<ParamError> for ModelError {
    fn from(e: ParamError) -> Self {
        ModelError::Param(e)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerSlots {
    pub wq: SlotId,
    pub bq: SlotId,
    pub wk: SlotId,
    pub bk: SlotId,
    pub wv: SlotId,
    pub bv: SlotId,
    pub wo: SlotId,
    pub bo: SlotId,
    pub attn_gamma: SlotId,
    pub attn_beta: SlotId,
    pub w1: SlotId,
    pub b1: SlotId,
    pub w2: SlotId,
    pub b2: SlotId,
    pub ffn_gamma: SlotId,
    pub ffn_beta: SlotId,
}

/// Resolved slots for one stream's full path from ids to hidden states.
#[derive(Clone, Debug)]
pub struct StreamSlots {
    pub token: SlotId,
    pub position: SlotId,
    pub segment: SlotId,
    pub granularity: Option<SlotId>,
    pub emb_gamma: SlotId,
    pub emb_beta: SlotId,
    pub layers: Vec<LayerSlots>,
    pub mlm_bias: SlotId,
}

/// How training-time dropout is seeded. Evaluation applies no dropout.
#[derive(Clone, Copy, Debug)]
pub struct RunMode {
    pub train: bool,
    pub dropout_seed: u64,
}

impl RunMode {
    pub fn eval() -> Self {
        RunMode { train: false, dropout_seed: 0 }
    }

    pub fn train(dropout_seed: u64) -> Self {
        RunMode { train: true, dropout_seed }
    }
}

/// Attention probabilities for one layer: `heads × s` rows of length `s`.
/// Row `h*s + i` is query position `i` of head `h`.
pub type AttnProbs<T> = Tensor<T>;

pub struct StreamOutput<T> {
    /// Final-layer hidden states, `[s, d]`.
    pub hidden: Tensor<T>,
    /// Post-softmax attention per layer (`[heads*s, s]` each).
    pub attention: Vec<AttnProbs<T>>,
}

impl<T: Real> StreamOutput<T> {
    pub fn cls(&self) -> &[T] {
        self.hidden.row(0)
    }
}

pub struct ForwardOutput<T> {
    pub fine: Option<StreamOutput<T>>,
    pub coarse: Option<StreamOutput<T>>,
    /// Hybrid only: attention over the concatenated sequence.
    pub joint_attention: Vec<AttnProbs<T>>,
    pub fine_len: usize,
    pub coarse_len: usize,
    /// Matrix-multiply FLOPs spent in the encoder stacks (2·m·n·k per
    /// product); embeddings and element-wise work are not counted.
    pub flops: u64,
}

impl<T: Real> ForwardOutput<T> {
    pub fn fine_cls(&self) -> &[T] {
        self.fine.as_ref().expect("fine stream not computed").cls()
    }

    pub fn coarse_cls(&self) -> &[T] {
        self.coarse.as_ref().expect("coarse stream not computed").cls()
    }

    pub fn fine_hidden(&self) -> &Tensor<T> {
        &self.fine.as_ref().expect("fine stream not computed").hidden
    }

    pub fn coarse_hidden(&self) -> &Tensor<T> {
        &self.coarse.as_ref().expect("coarse stream not computed").hidden
    }
}

struct LayerTrace<T> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Post-softmax probabilities, `[heads*s, s]`.
    probs: Tensor<T>,
    /// Probabilities after attention dropout (used by the value product).
    probs_dropped: Tensor<T>,
    attn_drop: DropoutMask,
    context: Tensor<T>,
    out_drop: DropoutMask,
    ln1: LayerNormCache<T>,
    x1: Tensor<T>,
    ffn_pre: Tensor<T>,
    ffn_act: Tensor<T>,
    ffn_drop: DropoutMask,
    ln2: LayerNormCache<T>,
}

pub struct StreamTrace<T> {
    token_src: Vec<(SlotId, u32)>,
    pos_ids: Vec<u32>,
    seg_ids: Vec<u32>,
    gran_ids: Option<Vec<u32>>,
    slots: StreamSlots,
    emb_ln: LayerNormCache<T>,
    emb_drop: DropoutMask,
    layers: Vec<LayerTrace<T>>,
}

pub struct Trace<T> {
    pub fine: Option<StreamTrace<T>>,
    pub coarse: Option<StreamTrace<T>>,
    pub joint: Option<StreamTrace<T>>,
    fine_len: usize,
    coarse_len: usize,
}

pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    fine_slots: StreamSlots,
    coarse_slots: StreamSlots,
}

// Column-block helpers for splitting hidden states into heads.
fn cols_block<T: Real>(t: &Tensor<T>, start: usize, width: usize) -> Tensor<T> {
    let s = t.rows();
    let mut out = Tensor::zeros(&[s, width]);
    for i in 0..s {
        out.row_mut(i).copy_from_slice(&t.row(i)[start..start + width]);
    }
    out
}

fn add_cols_block<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>, start: usize) {
    for i in 0..src.rows() {
        let d_row = dst.row_mut(i);
        for (j, &v) in src.row(i).iter().enumerate() {
            d_row[start + j] = d_row[start + j] + v;
        }
    }
}

fn rows_block<T: Real>(t: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let d = t.cols();
    let mut out = Tensor::zeros(&[count, d]);
    for i in 0..count {
        out.row_mut(i).copy_from_slice(t.row(start + i));
    }
    out
}

impl<T: Real> Model<T> {
    /// Initializes all parameters for `cfg`: truncated normal (std 0.02)
    /// weights and embeddings, zero biases, unit layer-norm gains.
    /// Identical seeds give bitwise-identical stores.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(sub_seed(seed, "init", 0));
        register_layout(&cfg, &mut store, &mut rng)?;
        Self::from_store(cfg, store)
    }

    /// Rebuilds a model around an existing store (checkpoint load). Extra
    /// slots such as fine-tuning heads are allowed and left untouched.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (fine_slots, coarse_slots) = resolve_layout(&cfg, &store)?;
        Ok(Model { cfg, store, fine_slots, coarse_slots })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn stream_slots(&self, stream: Stream) -> &StreamSlots {
        match stream {
            Stream::Fine => &self.fine_slots,
            Stream::Coarse => &self.coarse_slots,
        }
    }

    fn check_ids(&self, stream: Stream, ids: &[u32]) -> Result<(), ModelError> {
        let vocab = match stream {
            Stream::Fine => self.cfg.fine_vocab_size,
            Stream::Coarse => self.cfg.coarse_vocab_size,
        };
        if ids.len() > self.cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                stream: stream.as_str(),
                len: ids.len(),
                max: self.cfg.max_positions,
            });
        }
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(ModelError::TokenOutOfRange {
                    stream: stream.as_str(),
                    position,
                    id,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Full forward pass per the variant. For `ambert`/`combo` the two
    /// streams are entirely independent computations; for `hybrid` one
    /// attention runs over the concatenated sequence and the per-stream
    /// hidden states are row slices of it.
    pub fn forward(
        &self,
        pair: &TokenSeqPair,
        mode: RunMode,
    ) -> Result<(ForwardOutput<T>, Trace<T>), ModelError> {
        self.check_ids(Stream::Fine, &pair.fine_ids)?;
        self.check_ids(Stream::Coarse, &pair.coarse_ids)?;
        let fl = pair.fine_ids.len();
        let cl = pair.coarse_ids.len();
        let mut flops = 0u64;
        match self.cfg.variant {
            Variant::Ambert | Variant::Combo => {
                let (fine_out, fine_trace) = self.run_single_stream(Stream::Fine, pair, mode, &mut flops)?;
                let (coarse_out, coarse_trace) =
                    self.run_single_stream(Stream::Coarse, pair, mode, &mut flops)?;
                Ok((
                    ForwardOutput {
                        fine: Some(fine_out),
                        coarse: Some(coarse_out),
                        joint_attention: Vec::new(),
                        fine_len: fl,
                        coarse_len: cl,
                        flops,
                    },
                    Trace {
                        fine: Some(fine_trace),
                        coarse: Some(coarse_trace),
                        joint: None,
                        fine_len: fl,
                        coarse_len: cl,
                    },
                ))
            }
            Variant::Hybrid => {
                let slots = &self.fine_slots; // encoder slots are shared; tables differ
                let mut token_src: Vec<(SlotId, u32)> = Vec::with_capacity(fl + cl);
                for &id in &pair.fine_ids {
                    token_src.push((self.fine_slots.token, id));
                }
                for &id in &pair.coarse_ids {
                    token_src.push((self.coarse_slots.token, id));
                }
                // Positions restart at the coarse sub-sequence.
                let mut pos_ids: Vec<u32> = (0..fl as u32).collect();
                pos_ids.extend(0..cl as u32);
                let mut seg_ids: Vec<u32> =
                    pair.fine_segments.iter().map(|&s| s as u32).collect();
                seg_ids.extend(pair.coarse_segments.iter().map(|&s| s as u32));
                let gran_ids = if self.cfg.granularity_embedding {
                    let mut g = vec![0u32; fl];
                    g.extend(vec![1u32; cl]);
                    Some(g)
                } else {
                    None
                };
                let rng_seed = sub_seed(mode.dropout_seed, "joint", 0);
                let (hidden, attention, trace) = run_stream(
                    &self.cfg,
                    &self.store,
                    slots,
                    token_src,
                    pos_ids,
                    seg_ids,
                    gran_ids,
                    mode,
                    rng_seed,
                    &mut flops,
                )?;
                let fine_hidden = rows_block(&hidden, 0, fl);
                let coarse_hidden = rows_block(&hidden, fl, cl);
                Ok((
                    ForwardOutput {
                        fine: Some(StreamOutput { hidden: fine_hidden, attention: Vec::new() }),
                        coarse: Some(StreamOutput {
                            hidden: coarse_hidden,
                            attention: Vec::new(),
                        }),
                        joint_attention: attention,
                        fine_len: fl,
                        coarse_len: cl,
                        flops,
                    },
                    Trace {
                        fine: None,
                        coarse: None,
                        joint: Some(trace),
                        fine_len: fl,
                        coarse_len: cl,
                    },
                ))
            }
        }
    }

    /// Runs exactly one stream (the efficient-inference path). Rejected for
    /// `hybrid`, whose streams interact structurally.
    pub fn forward_stream(
        &self,
        stream: Stream,
        pair: &TokenSeqPair,
        mode: RunMode,
    ) -> Result<(StreamOutput<T>, StreamTrace<T>), ModelError> {
        if self.cfg.variant == Variant::Hybrid {
            return Err(ModelError::VariantMismatch(
                "hybrid concatenates the streams in one encoder; single-stream runs are undefined"
                    .into(),
            ));
        }
        let ids = match stream {
            Stream::Fine => &pair.fine_ids,
            Stream::Coarse => &pair.coarse_ids,
        };
        self.check_ids(stream, ids)?;
        let mut flops = 0u64;
        self.run_single_stream(stream, pair, mode, &mut flops)
    }

    fn run_single_stream(
        &self,
        stream: Stream,
        pair: &TokenSeqPair,
        mode: RunMode,
        flops: &mut u64,
    ) -> Result<(StreamOutput<T>, StreamTrace<T>), ModelError> {
        let (slots, ids, segs) = match stream {
            Stream::Fine => (&self.fine_slots, &pair.fine_ids, &pair.fine_segments),
            Stream::Coarse => (&self.coarse_slots, &pair.coarse_ids, &pair.coarse_segments),
        };
        let token_src: Vec<(SlotId, u32)> = ids.iter().map(|&id| (slots.token, id)).collect();
        let pos_ids: Vec<u32> = (0..ids.len() as u32).collect();
        let seg_ids: Vec<u32> = segs.iter().map(|&s| s as u32).collect();
        let rng_seed = sub_seed(mode.dropout_seed, stream.as_str(), 0);
        let (hidden, attention, trace) = run_stream(
            &self.cfg,
            &self.store,
            slots,
            token_src,
            pos_ids,
            seg_ids,
            None,
            mode,
            rng_seed,
            flops,
        )?;
        Ok((StreamOutput { hidden, attention }, trace))
    }

    /// Backpropagates hidden-state gradients through the traced forward,
    /// accumulating into the store's gradient buffers. The fine stream is
    /// processed first, then the coarse stream, so shared slots receive the
    /// sum of both sites' gradients in a fixed order.
    pub fn backward(
        &mut self,
        trace: &Trace<T>,
        d_fine_hidden: Option<&Tensor<T>>,
        d_coarse_hidden: Option<&Tensor<T>>,
    ) -> Result<(), ModelError> {
        match self.cfg.variant {
            Variant::Ambert | Variant::Combo => {
                if let (Some(st), Some(d)) = (&trace.fine, d_fine_hidden) {
                    backward_stream(&self.cfg, &mut self.store, st, d)?;
                }
                if let (Some(st), Some(d)) = (&trace.coarse, d_coarse_hidden) {
                    backward_stream(&self.cfg, &mut self.store, st, d)?;
                }
            }
            Variant::Hybrid => {
                let st = trace.joint.as_ref().expect("hybrid trace");
                let s = trace.fine_len + trace.coarse_len;
                let d = self.cfg.hidden;
                let mut d_joint = Tensor::zeros(&[s, d]);
                if let Some(df) = d_fine_hidden {
                    for i in 0..trace.fine_len {
                        d_joint.row_mut(i).copy_from_slice(df.row(i));
                    }
                }
                if let Some(dc) = d_coarse_hidden {
                    for i in 0..trace.coarse_len {
                        d_joint.row_mut(trace.fine_len + i).copy_from_slice(dc.row(i));
                    }
                }
                backward_stream(&self.cfg, &mut self.store, st, &d_joint)?;
            }
        }
        Ok(())
    }
}

/// Registers the full parameter layout for `cfg` with fresh values.
fn register_layout<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(), ModelError> {
    let d = cfg.hidden;
    let f = cfg.ffn_inner;

    register_normal(store, "fine.token_embedding", &[cfg.fine_vocab_size, d], INIT_STD, rng);
    register_normal(store, "coarse.token_embedding", &[cfg.coarse_vocab_size, d], INIT_STD, rng);

    let register_embedding_block =
        |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str| {
            let p = |name: &str| {
                if prefix.is_empty() {
                    format!("embeddings.{name}")
                } else {
                    format!("{prefix}.embeddings.{name}")
                }
            };
            register_normal(store, &p("position"), &[cfg.max_positions, d], INIT_STD, rng);
            register_normal(store, &p("segment"), &[cfg.type_vocab, d], INIT_STD, rng);
            register_const(store, &p("norm.gamma"), &[d], 1.0);
            register_const(store, &p("norm.beta"), &[d], 0.0);
        };

    let register_encoder = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str| {
        for i in 0..cfg.layers {
            let p = |name: &str| {
                if prefix.is_empty() {
                    format!("encoder.{i}.{name}")
                } else {
                    format!("{prefix}.encoder.{i}.{name}")
                }
            };
            register_normal(store, &p("attn.wq"), &[d, d], INIT_STD, rng);
            register_const(store, &p("attn.bq"), &[d], 0.0);
            register_normal(store, &p("attn.wk"), &[d, d], INIT_STD, rng);
            register_const(store, &p("attn.bk"), &[d], 0.0);
            register_normal(store, &p("attn.wv"), &[d, d], INIT_STD, rng);
            register_const(store, &p("attn.bv"), &[d], 0.0);
            register_normal(store, &p("attn.wo"), &[d, d], INIT_STD, rng);
            register_const(store, &p("attn.bo"), &[d], 0.0);
            register_const(store, &p("attn.norm.gamma"), &[d], 1.0);
            register_const(store, &p("attn.norm.beta"), &[d], 0.0);
            register_normal(store, &p("ffn.w1"), &[d, f], INIT_STD, rng);
            register_const(store, &p("ffn.b1"), &[f], 0.0);
            register_normal(store, &p("ffn.w2"), &[f, d], INIT_STD, rng);
            register_const(store, &p("ffn.b2"), &[d], 0.0);
            register_const(store, &p("ffn.norm.gamma"), &[d], 1.0);
            register_const(store, &p("ffn.norm.beta"), &[d], 0.0);
        }
    };

    match cfg.variant {
        Variant::Ambert => {
            // One storage per layer parameter, addressable through either
            // stream's name.
            register_embedding_block(store, rng, "");
            register_encoder(store, rng, "");
            alias_shared_names(cfg, store)?;
        }
        Variant::Combo => {
            register_embedding_block(store, rng, "fine");
            register_embedding_block(store, rng, "coarse");
            register_encoder(store, rng, "fine");
            register_encoder(store, rng, "coarse");
        }
        Variant::Hybrid => {
            register_embedding_block(store, rng, "");
            if cfg.granularity_embedding {
                register_normal(store, "embeddings.granularity", &[2, d], INIT_STD, rng);
            }
            register_encoder(store, rng, "");
        }
    }

    register_const(store, "fine.mlm_bias", &[cfg.fine_vocab_size], 0.0);
    register_const(store, "coarse.mlm_bias", &[cfg.coarse_vocab_size], 0.0);
    Ok(())
}

/// For `ambert`, makes every shared slot addressable as `fine.<key>` and
/// `coarse.<key>`.
fn alias_shared_names<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
) -> Result<(), ModelError> {
    let mut shared: Vec<String> = vec![
        "embeddings.position".into(),
        "embeddings.segment".into(),
        "embeddings.norm.gamma".into(),
        "embeddings.norm.beta".into(),
    ];
    for i in 0..cfg.layers {
        for name in [
            "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
            "attn.bo", "attn.norm.gamma", "attn.norm.beta", "ffn.w1", "ffn.b1", "ffn.w2",
            "ffn.b2", "ffn.norm.gamma", "ffn.norm.beta",
        ] {
            shared.push(format!("encoder.{i}.{name}"));
        }
    }
    for key in shared {
        let id = store.lookup(&key)?;
        store.alias(&format!("fine.{key}"), id)?;
        store.alias(&format!("coarse.{key}"), id)?;
    }
    Ok(())
}

fn resolve_layer<T: Real>(
    store: &ParamStore<T>,
    prefix: &str,
    i: usize,
) -> Result<LayerSlots, ParamError> {
    let p = |name: &str| format!("{prefix}encoder.{i}.{name}");
    Ok(LayerSlots {
        wq: store.lookup(&p("attn.wq"))?,
        bq: store.lookup(&p("attn.bq"))?,
        wk: store.lookup(&p("attn.wk"))?,
        bk: store.lookup(&p("attn.bk"))?,
        wv: store.lookup(&p("attn.wv"))?,
        bv: store.lookup(&p("attn.bv"))?,
        wo: store.lookup(&p("attn.wo"))?,
        bo: store.lookup(&p("attn.bo"))?,
        attn_gamma: store.lookup(&p("attn.norm.gamma"))?,
        attn_beta: store.lookup(&p("attn.norm.beta"))?,
        w1: store.lookup(&p("ffn.w1"))?,
        b1: store.lookup(&p("ffn.b1"))?,
        w2: store.lookup(&p("ffn.w2"))?,
        b2: store.lookup(&p("ffn.b2"))?,
        ffn_gamma: store.lookup(&p("ffn.norm.gamma"))?,
        ffn_beta: store.lookup(&p("ffn.norm.beta"))?,
    })
}

fn resolve_stream<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    stream: Stream,
    shared_prefix: bool,
) -> Result<StreamSlots, ParamError> {
    // For ambert the stream-prefixed aliases resolve to shared storage; for
    // combo they are disjoint slots; for hybrid the canonical names are used.
    let prefix = if shared_prefix { String::new() } else { format!("{}.", stream.as_str()) };
    let mut layers = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        layers.push(resolve_layer(store, &prefix, i)?);
    }
    Ok(StreamSlots {
        token: store.lookup(&format!("{}.token_embedding", stream.as_str()))?,
        position: store.lookup(&format!("{prefix}embeddings.position"))?,
        segment: store.lookup(&format!("{prefix}embeddings.segment"))?,
        granularity: if cfg.variant == Variant::Hybrid && cfg.granularity_embedding {
            Some(store.lookup("embeddings.granularity")?)
        } else {
            None
        },
        emb_gamma: store.lookup(&format!("{prefix}embeddings.norm.gamma"))?,
        emb_beta: store.lookup(&format!("{prefix}embeddings.norm.beta"))?,
        layers,
        mlm_bias: store.lookup(&format!("{}.mlm_bias", stream.as_str()))?,
    })
}

fn resolve_layout<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
) -> Result<(StreamSlots, StreamSlots), ModelError> {
    // Ambert and combo resolve through the stream-prefixed names (aliases of
    // one storage for ambert, disjoint slots for combo); hybrid has no
    // per-stream encoder names at all.
    let canonical = cfg.variant == Variant::Hybrid;
    Ok((
        resolve_stream(cfg, store, Stream::Fine, canonical)?,
        resolve_stream(cfg, store, Stream::Coarse, canonical)?,
    ))
}

/// Shared encoder body: embeddings, `layers` post-LN transformer blocks.
#[allow(clippy::too_many_arguments)]
fn run_stream<T: Real>(
    cfg: &ModelConfig,
    store: &ParamStore<T>,
    slots: &StreamSlots,
    token_src: Vec<(SlotId, u32)>,
    pos_ids: Vec<u32>,
    seg_ids: Vec<u32>,
    gran_ids: Option<Vec<u32>>,
    mode: RunMode,
    rng_seed: u64,
    flops: &mut u64,
) -> Result<(Tensor<T>, Vec<AttnProbs<T>>, StreamTrace<T>), ModelError> {
    let s = token_src.len();
    let d = cfg.hidden;
    let h = cfg.heads;
    let hs = cfg.head_size;
    let mut rng = rng_from_seed(rng_seed);
    let train = mode.train;

    // Embedding sum: token + position + segment (+ granularity).
    let mut x = Tensor::zeros(&[s, d]);
    for (i, &(slot, id)) in token_src.iter().enumerate() {
        let table = store.value(slot);
        if id as usize >= table.rows() {
            return Err(OpError::IdOutOfRange { position: i, id, vocab: table.rows() }.into());
        }
        x.row_mut(i).copy_from_slice(table.row(id as usize));
    }
    let pos_rows = embedding_lookup(store.value(slots.position), &pos_ids)?;
    x.add_assign(&pos_rows);
    let seg_rows = embedding_lookup(store.value(slots.segment), &seg_ids)?;
    x.add_assign(&seg_rows);
    if let (Some(gslot), Some(gids)) = (slots.granularity, gran_ids.as_ref()) {
        let g_rows = embedding_lookup(store.value(gslot), gids)?;
        x.add_assign(&g_rows);
    }
    let (mut x, emb_ln) = layer_norm(&x, store.value(slots.emb_gamma), store.value(slots.emb_beta))?;
    let emb_drop = if train {
        dropout(&mut x, cfg.hidden_dropout, &mut rng)
    } else {
        DropoutMask::identity()
    };

    // Padding columns are excluded from every attention row.
    let pad_bias: Vec<T> = token_src
        .iter()
        .map(|&(_, id)| if id == PAD_ID { real::<T>(MASK_BIAS) } else { T::zero() })
        .collect();
    let scale = real::<T>(hs as f64).sqrt().recip();

    let mut layers = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for layer in &slots.layers {
        let input = x.clone();
        let mut q = matmul(&input, store.value(layer.wq))?;
        add_bias(&mut q, store.value(layer.bq))?;
        let mut k = matmul(&input, store.value(layer.wk))?;
        add_bias(&mut k, store.value(layer.bk))?;
        let mut v = matmul(&input, store.value(layer.wv))?;
        add_bias(&mut v, store.value(layer.bv))?;
        *flops += 3 * 2 * (s * d * d) as u64;

        let mut scores = Tensor::zeros(&[h * s, s]);
        for head in 0..h {
            let qh = cols_block(&q, head * hs, hs);
            let kh = cols_block(&k, head * hs, hs);
            let sh = matmul_nt(&qh, &kh)?;
            *flops += 2 * (s * s * hs) as u64;
            for i in 0..s {
                let dst = scores.row_mut(head * s + i);
                for j in 0..s {
                    dst[j] = sh.row(i)[j] * scale + pad_bias[j];
                }
            }
        }
        let probs = softmax_rows(&scores);
        let mut probs_dropped = probs.clone();
        let attn_drop = if train {
            dropout(&mut probs_dropped, cfg.attention_dropout, &mut rng)
        } else {
            DropoutMask::identity()
        };

        let mut context = Tensor::zeros(&[s, d]);
        for head in 0..h {
            let ah = rows_block(&probs_dropped, head * s, s);
            let vh = cols_block(&v, head * hs, hs);
            let ch = matmul(&ah, &vh)?;
            *flops += 2 * (s * s * hs) as u64;
            add_cols_block(&mut context, &ch, head * hs);
        }
        let mut attn_out = matmul(&context, store.value(layer.wo))?;
        add_bias(&mut attn_out, store.value(layer.bo))?;
        *flops += 2 * (s * d * d) as u64;
        let out_drop = if train {
            dropout(&mut attn_out, cfg.hidden_dropout, &mut rng)
        } else {
            DropoutMask::identity()
        };
        attn_out.add_assign(&input);
        let (x1, ln1) =
            layer_norm(&attn_out, store.value(layer.attn_gamma), store.value(layer.attn_beta))?;

        let mut ffn_pre = matmul(&x1, store.value(layer.w1))?;
        add_bias(&mut ffn_pre, store.value(layer.b1))?;
        let ffn_act = gelu(&ffn_pre);
        let mut ffn_out = matmul(&ffn_act, store.value(layer.w2))?;
        add_bias(&mut ffn_out, store.value(layer.b2))?;
        *flops += 2 * 2 * (s * d * cfg.ffn_inner) as u64;
        let ffn_drop = if train {
            dropout(&mut ffn_out, cfg.hidden_dropout, &mut rng)
        } else {
            DropoutMask::identity()
        };
        ffn_out.add_assign(&x1);
        let (x2, ln2) =
            layer_norm(&ffn_out, store.value(layer.ffn_gamma), store.value(layer.ffn_beta))?;

        attention.push(probs.clone());
        layers.push(LayerTrace {
            input,
            q,
            k,
            v,
            probs,
            probs_dropped,
            attn_drop,
            context,
            out_drop,
            ln1,
            x1,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ln2,
        });
        x = x2;
    }

    let trace = StreamTrace {
        token_src,
        pos_ids,
        seg_ids,
        gran_ids,
        slots: slots.clone(),
        emb_ln,
        emb_drop,
        layers,
    };
    Ok((x, attention, trace))
}

/// Reverse pass through one stream, mirroring `run_stream` step for step.
fn backward_stream<T: Real>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    trace: &StreamTrace<T>,
    d_hidden: &Tensor<T>,
) -> Result<(), ModelError> {
    let s = trace.token_src.len();
    let d = cfg.hidden;
    let h = cfg.heads;
    let hs = cfg.head_size;
    let scale = real::<T>(hs as f64).sqrt().recip();
    let slots = &trace.slots;

    let mut dy = d_hidden.clone();
    for (layer_slots, lt) in slots.layers.iter().zip(trace.layers.iter()).rev() {
        // LN after FFN.
        let mut dg = Tensor::zeros(&[d]);
        let mut db = Tensor::zeros(&[d]);
        let d_sum2 =
            layer_norm_backward(&lt.ln2, store.value(layer_slots.ffn_gamma), &dy, &mut dg, &mut db);
        store.accumulate_grad(layer_slots.ffn_gamma, &dg);
        store.accumulate_grad(layer_slots.ffn_beta, &db);

        let mut d_x1 = d_sum2.clone(); // residual branch
        let mut d_f2 = d_sum2;
        dropout_backward(&lt.ffn_drop, &mut d_f2);
        let mut db2 = Tensor::zeros(&[d]);
        add_bias_backward(&d_f2, &mut db2);
        store.accumulate_grad(layer_slots.b2, &db2);
        let d_act = matmul_nt(&d_f2, store.value(layer_slots.w2))?;
        let dw2 = matmul_tn(&lt.ffn_act, &d_f2)?;
        store.accumulate_grad(layer_slots.w2, &dw2);
        let d_pre = gelu_backward(&lt.ffn_pre, &d_act);
        let mut db1 = Tensor::zeros(&[cfg.ffn_inner]);
        add_bias_backward(&d_pre, &mut db1);
        store.accumulate_grad(layer_slots.b1, &db1);
        d_x1.add_assign(&matmul_nt(&d_pre, store.value(layer_slots.w1))?);
        let dw1 = matmul_tn(&lt.x1, &d_pre)?;
        store.accumulate_grad(layer_slots.w1, &dw1);

        // LN after attention.
        let mut dg1 = Tensor::zeros(&[d]);
        let mut db1n = Tensor::zeros(&[d]);
        let d_sum1 = layer_norm_backward(
            &lt.ln1,
            store.value(layer_slots.attn_gamma),
            &d_x1,
            &mut dg1,
            &mut db1n,
        );
        store.accumulate_grad(layer_slots.attn_gamma, &dg1);
        store.accumulate_grad(layer_slots.attn_beta, &db1n);

        let mut d_input = d_sum1.clone(); // residual branch
        let mut d_attn_out = d_sum1;
        dropout_backward(&lt.out_drop, &mut d_attn_out);
        let mut dbo = Tensor::zeros(&[d]);
        add_bias_backward(&d_attn_out, &mut dbo);
        store.accumulate_grad(layer_slots.bo, &dbo);
        let d_context = matmul_nt(&d_attn_out, store.value(layer_slots.wo))?;
        let dwo = matmul_tn(&lt.context, &d_attn_out)?;
        store.accumulate_grad(layer_slots.wo, &dwo);

        // Heads: context_h = probs'_h · v_h.
        let mut d_probs = Tensor::zeros(&[h * s, s]);
        let mut d_v = Tensor::zeros(&[s, d]);
        for head in 0..h {
            let d_ch = cols_block(&d_context, head * hs, hs);
            let vh = cols_block(&lt.v, head * hs, hs);
            let ah = rows_block(&lt.probs_dropped, head * s, s);
            let d_ah = matmul_nt(&d_ch, &vh)?;
            for i in 0..s {
                d_probs.row_mut(head * s + i).copy_from_slice(d_ah.row(i));
            }
            let d_vh = matmul_tn(&ah, &d_ch)?;
            add_cols_block(&mut d_v, &d_vh, head * hs);
        }
        dropout_backward(&lt.attn_drop, &mut d_probs);
        let mut d_scores = softmax_backward(&lt.probs, &d_probs);
        for v in d_scores.data_mut() {
            *v = *v * scale;
        }
        // scores_h = q_h · k_hᵀ (scaled): dq = dS·k, dk = dSᵀ·q.
        let mut d_q = Tensor::zeros(&[s, d]);
        let mut d_k = Tensor::zeros(&[s, d]);
        for head in 0..h {
            let d_sh = rows_block(&d_scores, head * s, s);
            let qh = cols_block(&lt.q, head * hs, hs);
            let kh = cols_block(&lt.k, head * hs, hs);
            let d_qh = matmul(&d_sh, &kh)?;
            let d_kh = matmul_tn(&d_sh, &qh)?;
            add_cols_block(&mut d_q, &d_qh, head * hs);
            add_cols_block(&mut d_k, &d_kh, head * hs);
        }

        for (w, b, d_proj) in [
            (layer_slots.wq, layer_slots.bq, &d_q),
            (layer_slots.wk, layer_slots.bk, &d_k),
            (layer_slots.wv, layer_slots.bv, &d_v),
        ] {
            let mut dbias = Tensor::zeros(&[d]);
            add_bias_backward(d_proj, &mut dbias);
            store.accumulate_grad(b, &dbias);
            d_input.add_assign(&matmul_nt(d_proj, store.value(w))?);
            let dw = matmul_tn(&lt.input, d_proj)?;
            store.accumulate_grad(w, &dw);
        }
        dy = d_input;
    }

    // Embedding block.
    dropout_backward(&trace.emb_drop, &mut dy);
    let mut dg = Tensor::zeros(&[d]);
    let mut db = Tensor::zeros(&[d]);
    let d_sum = layer_norm_backward(&trace.emb_ln, store.value(slots.emb_gamma), &dy, &mut dg, &mut db);
    store.accumulate_grad(slots.emb_gamma, &dg);
    store.accumulate_grad(slots.emb_beta, &db);

    for (i, &(slot, id)) in trace.token_src.iter().enumerate() {
        let grad = store.grad_mut(slot);
        let row = grad.row_mut(id as usize);
        for (g, &v) in row.iter_mut().zip(d_sum.row(i)) {
            *g = *g + v;
        }
    }
    embedding_backward(&d_sum, &trace.pos_ids, store.grad_mut(slots.position));
    embedding_backward(&d_sum, &trace.seg_ids, store.grad_mut(slots.segment));
    if let (Some(gslot), Some(gids)) = (slots.granularity, trace.gran_ids.as_ref()) {
        embedding_backward(&d_sum, gids, store.grad_mut(gslot));
    }
    Ok(())
}

/// Closed-form parameter count of one single-stream encoder with vocabulary
/// `v`: token table, position and segment tables, embedding layer norm, the
/// layer stack, and the tied MLM head bias.
pub fn census_single_encoder(cfg: &ModelConfig, v: usize) -> u64 {
    let d = cfg.hidden as u64;
    let f = cfg.ffn_inner as u64;
    let layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    (v as u64) * d
        + (cfg.max_positions as u64) * d
        + (cfg.type_vocab as u64) * d
        + 2 * d
        + (cfg.layers as u64) * layer
        + v as u64
}

/// Closed-form parameter count for the configured variant.
pub fn census(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let vf = cfg.fine_vocab_size;
    let vc = cfg.coarse_vocab_size as u64;
    match cfg.variant {
        // Extra over a single encoder: the coarse token table and its tied
        // head bias — nothing else.
        Variant::Ambert => census_single_encoder(cfg, vf) + vc * d + vc,
        Variant::Combo => {
            census_single_encoder(cfg, vf) + census_single_encoder(cfg, cfg.coarse_vocab_size)
        }
        Variant::Hybrid => {
            let gran = if cfg.granularity_embedding { 2 * d } else { 0 };
            census_single_encoder(cfg, vf) + vc * d + vc + gran
        }
    }
}
