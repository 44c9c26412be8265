//! Flat `key = value` run configuration.
//!
//! Defaults reproduce the base-model pre-training recipe (12×768 encoder,
//! 512 positions, Adam with 10k-step warmup and linear decay to zero over
//! 1M steps, batch 512). Unknown keys are rejected so typos cannot
//! silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;

use ambert_core::model::{ModelConfig, Variant};
use ambert_core::optim::AdamHyper;
use ambert_core::pretrain::PretrainHyper;
use ambert_core::tokenizer::Mode;

use crate::error::{io_data, CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub tokenizer_mode: Mode,
    pub layers: usize,
    pub hidden_size: usize,
    pub attention_heads: usize,
    pub attention_head_size: usize,
    pub ffn_inner: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub granularity_embedding: bool,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub warmup_steps: u64,
    pub peak_learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub lr_decay: String,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub mask_rate: f64,
    pub nsp: bool,
    pub max_fine_len: usize,
    pub max_coarse_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::Ambert,
            tokenizer_mode: Mode::Subword,
            layers: 12,
            hidden_size: 768,
            attention_heads: 12,
            attention_head_size: 64,
            ffn_inner: 3072,
            max_positions: 512,
            type_vocab: 2,
            granularity_embedding: true,
            dropout: 0.1,
            attention_dropout: 0.1,
            warmup_steps: 10_000,
            peak_learning_rate: 1e-4,
            batch_size: 512,
            weight_decay: 0.01,
            max_steps: 1_000_000,
            lr_decay: "linear".to_string(),
            adam_epsilon: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            mask_rate: 0.15,
            nsp: false,
            max_fine_len: 512,
            max_coarse_len: 512,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: 2×64 model, short sequences, faster schedule.
    pub fn desk() -> Self {
        RunConfig {
            layers: 2,
            hidden_size: 64,
            attention_heads: 4,
            attention_head_size: 16,
            ffn_inner: 256,
            max_positions: 128,
            warmup_steps: 100,
            peak_learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 100_000,
            max_fine_len: 64,
            max_coarse_len: 64,
            ..RunConfig::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("variant", self.variant.as_str().to_string());
        put("tokenizer_mode", self.tokenizer_mode.to_string());
        put("layers", self.layers.to_string());
        put("hidden_size", self.hidden_size.to_string());
        put("attention_heads", self.attention_heads.to_string());
        put("attention_head_size", self.attention_head_size.to_string());
        put("ffn_inner", self.ffn_inner.to_string());
        put("max_positions", self.max_positions.to_string());
        put("type_vocab", self.type_vocab.to_string());
        put("granularity_embedding", self.granularity_embedding.to_string());
        put("dropout", format_f64(self.dropout));
        put("attention_dropout", format_f64(self.attention_dropout));
        put("warmup_steps", self.warmup_steps.to_string());
        put("peak_learning_rate", format_f64(self.peak_learning_rate));
        put("batch_size", self.batch_size.to_string());
        put("weight_decay", format_f64(self.weight_decay));
        put("max_steps", self.max_steps.to_string());
        put("lr_decay", self.lr_decay.clone());
        put("adam_epsilon", format_f64(self.adam_epsilon));
        put("adam_beta1", format_f64(self.adam_beta1));
        put("adam_beta2", format_f64(self.adam_beta2));
        put("mask_rate", format_f64(self.mask_rate));
        put("nsp", self.nsp.to_string());
        put("max_fine_len", self.max_fine_len.to_string());
        put("max_coarse_len", self.max_coarse_len.to_string());
        s
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are allowed; unknown and duplicate keys are not.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::data(format!("line {line_no}: expected key = value")))?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(CliError::data(format!("line {line_no}: duplicate key {key}")));
            }
            seen.push(key.to_string());
            cfg.set(key, value)
                .map_err(|msg| CliError::data(format!("line {line_no}: {msg}")))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match key {
            "variant" => {
                self.variant = Variant::parse(value)
                    .ok_or_else(|| format!("unknown variant {value:?}"))?;
            }
            "tokenizer_mode" => {
                self.tokenizer_mode = match value {
                    "subword" => Mode::Subword,
                    "char" => Mode::Char,
                    _ => return Err(format!("unknown tokenizer_mode {value:?}")),
                };
            }
            "layers" => self.layers = p(key, value)?,
            "hidden_size" => self.hidden_size = p(key, value)?,
            "attention_heads" => self.attention_heads = p(key, value)?,
            "attention_head_size" => self.attention_head_size = p(key, value)?,
            "ffn_inner" => self.ffn_inner = p(key, value)?,
            "max_positions" => self.max_positions = p(key, value)?,
            "type_vocab" => self.type_vocab = p(key, value)?,
            "granularity_embedding" => self.granularity_embedding = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "attention_dropout" => self.attention_dropout = p(key, value)?,
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "peak_learning_rate" => self.peak_learning_rate = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "lr_decay" => {
                if value != "linear" {
                    return Err(format!("unsupported lr_decay {value:?} (only linear)"));
                }
                self.lr_decay = value.to_string();
            }
            "adam_epsilon" => self.adam_epsilon = p(key, value)?,
            "adam_beta1" => self.adam_beta1 = p(key, value)?,
            "adam_beta2" => self.adam_beta2 = p(key, value)?,
            "mask_rate" => self.mask_rate = p(key, value)?,
            "nsp" => self.nsp = p(key, value)?,
            "max_fine_len" => self.max_fine_len = p(key, value)?,
            "max_coarse_len" => self.max_coarse_len = p(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_data(&format!("reading config {}", path.display()), e))?;
        Self::parse(&text).map_err(|e| CliError::data(format!("{}: {}", path.display(), e.message)))
    }

    pub fn model_config(&self, fine_vocab: usize, coarse_vocab: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            layers: self.layers,
            hidden: self.hidden_size,
            heads: self.attention_heads,
            head_size: self.attention_head_size,
            ffn_inner: self.ffn_inner,
            max_positions: self.max_positions,
            fine_vocab_size: fine_vocab,
            coarse_vocab_size: coarse_vocab,
            hidden_dropout: self.dropout,
            attention_dropout: self.attention_dropout,
            type_vocab: self.type_vocab,
            granularity_embedding: self.granularity_embedding,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            peak_lr: self.peak_learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            max_steps: self.max_steps,
        }
    }

    pub fn pretrain_hyper(&self) -> PretrainHyper {
        PretrainHyper {
            adam: self.adam(),
            batch_size: self.batch_size,
            mask_rate: self.mask_rate,
            nsp: self.nsp,
        }
    }
}

fn format_f64(x: f64) -> String {
    // Shortest representation that parses back exactly.
    let s = format!("{x}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), x);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_defaults() {
        let cfg = RunConfig::default();
        let parsed = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::parse("layers = 2\nbogus_key = 7\n").unwrap_err();
        assert!(err.message.contains("line 2"));
        assert!(err.message.contains("bogus_key"));
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = RunConfig::parse("layers = 2\nlayers = 3\n").unwrap_err();
        assert!(err.message.contains("duplicate"));
    }

    #[test]
    fn overrides_apply_on_top_of_defaults() {
        let cfg = RunConfig::parse("variant = hybrid\nbatch_size = 16\n").unwrap();
        assert_eq!(cfg.variant, Variant::Hybrid);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.layers, 12);
    }
}
