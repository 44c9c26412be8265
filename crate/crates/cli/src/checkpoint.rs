//! Checkpoint persistence: a UTF-8 manifest plus a little-endian f32 blob.
//!
//! The manifest records the format version, variant, step, master seed,
//! thread count, model config, the loss history, and a named-tensor index
//! (all aliasing names, shape, dtype, byte offset, sharing key). The blob
//! holds every slot once in index order; when optimizer state is present
//! the first and second Adam moments follow in the same order.
//! `load(save(x))` reproduces forward outputs bitwise: f32 values survive
//! the byte round trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ambert_core::model::{Model, ModelConfig, Variant};
use ambert_core::optim::AdamState;
use ambert_core::params::ParamStore;
use ambert_core::tensor::Tensor;
use ambert_core::tokenizer::Mode;

use crate::error::{io_data, CliError, CliResult};

pub const FORMAT_TAG: &str = "ambert-ckpt v1";

/// One `(step, fine, coarse, total)` row of the training history.
pub type HistoryRow = (u64, f64, f64, f64);

pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub step: u64,
    pub seed: u64,
    pub tokenizer_mode: Mode,
    pub history: Vec<HistoryRow>,
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("manifest")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    prefix.with_extension("blob")
}

fn config_lines(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "config.{k} {v}");
    };
    put("layers", cfg.layers.to_string());
    put("hidden", cfg.hidden.to_string());
    put("heads", cfg.heads.to_string());
    put("head_size", cfg.head_size.to_string());
    put("ffn_inner", cfg.ffn_inner.to_string());
    put("max_positions", cfg.max_positions.to_string());
    put("fine_vocab_size", cfg.fine_vocab_size.to_string());
    put("coarse_vocab_size", cfg.coarse_vocab_size.to_string());
    put("hidden_dropout", format!("{}", cfg.hidden_dropout));
    put("attention_dropout", format!("{}", cfg.attention_dropout));
    put("type_vocab", cfg.type_vocab.to_string());
    put("granularity_embedding", cfg.granularity_embedding.to_string());
    s
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes `<prefix>.manifest` and `<prefix>.blob`.
pub fn save(
    prefix: &Path,
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
    step: u64,
    seed: u64,
    tokenizer_mode: Mode,
    history: &[HistoryRow],
) -> CliResult<()> {
    let store = model.store();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format {FORMAT_TAG}");
    let _ = writeln!(manifest, "variant {}", model.config().variant);
    let _ = writeln!(manifest, "step {step}");
    let _ = writeln!(manifest, "seed {seed}");
    // Kernels are single-threaded; recorded so reproductions know the
    // determinism envelope.
    let _ = writeln!(manifest, "threads 1");
    let _ = writeln!(manifest, "rng_scheme subseed-v1");
    let _ = writeln!(manifest, "tokenizer_mode {tokenizer_mode}");
    manifest.push_str(&config_lines(model.config()));
    let _ = writeln!(manifest, "optimizer {}", adam.is_some());
    let _ = writeln!(manifest, "history {}", history.len());
    for (step, fine, coarse, total) in history {
        let _ = writeln!(manifest, "  {step} {fine:e} {coarse:e} {total:e}");
    }

    let mut blob: Vec<u8> = Vec::new();
    let _ = writeln!(manifest, "tensors {}", store.num_slots());
    for id in store.slot_ids() {
        let names = store.names(id).join(",");
        let shared = if store.is_shared(id) { store.key(id) } else { "-" };
        let tensor = store.value(id);
        let _ = writeln!(
            manifest,
            "  {names} {shared} {} f32 {}",
            shape_text(tensor.shape()),
            blob.len()
        );
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        let _ = writeln!(manifest, "adam_step {}", adam.step());
        for t in m.iter().chain(v.iter()) {
            for &x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    fs::write(manifest_path(prefix), manifest)
        .map_err(|e| io_data("writing checkpoint manifest", e))?;
    fs::write(blob_path(prefix), blob).map_err(|e| io_data("writing checkpoint blob", e))?;
    Ok(())
}

struct ManifestTensor {
    names: Vec<String>,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_usize(v: &str, what: &str) -> CliResult<usize> {
    v.parse().map_err(|_| CliError::data(format!("checkpoint manifest: bad {what} {v:?}")))
}

fn parse_u64(v: &str, what: &str) -> CliResult<u64> {
    v.parse().map_err(|_| CliError::data(format!("checkpoint manifest: bad {what} {v:?}")))
}

fn parse_f64(v: &str, what: &str) -> CliResult<f64> {
    v.parse().map_err(|_| CliError::data(format!("checkpoint manifest: bad {what} {v:?}")))
}

/// Loads a checkpoint pair. The returned model resolves its layout from the
/// named index, so slot order — and with it the optimizer-state layout —
/// matches the saved run exactly.
pub fn load(prefix: &Path) -> CliResult<Checkpoint> {
    let manifest_file = manifest_path(prefix);
    let text = fs::read_to_string(&manifest_file)
        .map_err(|e| io_data(&format!("reading {}", manifest_file.display()), e))?;
    let blob = fs::read(blob_path(prefix))
        .map_err(|e| io_data(&format!("reading {}", blob_path(prefix).display()), e))?;

    let mut lines = text.lines().peekable();
    let mut field = |name: &str| -> CliResult<String> {
        let line = lines
            .next()
            .ok_or_else(|| CliError::data(format!("checkpoint manifest: missing {name}")))?;
        line.strip_prefix(name)
            .map(|v| v.trim().to_string())
            .ok_or_else(|| CliError::data(format!("checkpoint manifest: expected {name}, got {line:?}")))
    };

    let format = field("format")?;
    if format != FORMAT_TAG {
        return Err(CliError::data(format!(
            "unsupported checkpoint format {format:?} (expected {FORMAT_TAG:?})"
        )));
    }
    let variant = Variant::parse(&field("variant")?)
        .ok_or_else(|| CliError::data("checkpoint manifest: unknown variant"))?;
    let step = parse_u64(&field("step")?, "step")?;
    let seed = parse_u64(&field("seed")?, "seed")?;
    let _threads = field("threads")?;
    let _scheme = field("rng_scheme")?;
    let tokenizer_mode = match field("tokenizer_mode")?.as_str() {
        "subword" => Mode::Subword,
        "char" => Mode::Char,
        other => return Err(CliError::data(format!("unknown tokenizer mode {other:?}"))),
    };

    let mut cfg_field = |name: &str| -> CliResult<String> {
        field(&format!("config.{name}"))
    };
    let cfg = ModelConfig {
        variant,
        layers: parse_usize(&cfg_field("layers")?, "layers")?,
        hidden: parse_usize(&cfg_field("hidden")?, "hidden")?,
        heads: parse_usize(&cfg_field("heads")?, "heads")?,
        head_size: parse_usize(&cfg_field("head_size")?, "head_size")?,
        ffn_inner: parse_usize(&cfg_field("ffn_inner")?, "ffn_inner")?,
        max_positions: parse_usize(&cfg_field("max_positions")?, "max_positions")?,
        fine_vocab_size: parse_usize(&cfg_field("fine_vocab_size")?, "fine_vocab_size")?,
        coarse_vocab_size: parse_usize(&cfg_field("coarse_vocab_size")?, "coarse_vocab_size")?,
        hidden_dropout: parse_f64(&cfg_field("hidden_dropout")?, "hidden_dropout")?,
        attention_dropout: parse_f64(&cfg_field("attention_dropout")?, "attention_dropout")?,
        type_vocab: parse_usize(&cfg_field("type_vocab")?, "type_vocab")?,
        granularity_embedding: cfg_field("granularity_embedding")? == "true",
    };

    let optimizer = field("optimizer")? == "true";
    let history_len = parse_usize(&field("history")?, "history length")?;
    let mut history = Vec::with_capacity(history_len);
    for _ in 0..history_len {
        let line = lines
            .next()
            .ok_or_else(|| CliError::data("checkpoint manifest: truncated history"))?;
        let mut parts = line.split_whitespace();
        let step = parse_u64(parts.next().unwrap_or(""), "history step")?;
        let fine = parse_f64(parts.next().unwrap_or(""), "history fine")?;
        let coarse = parse_f64(parts.next().unwrap_or(""), "history coarse")?;
        let total = parse_f64(parts.next().unwrap_or(""), "history total")?;
        history.push((step, fine, coarse, total));
    }

    let tensor_count = parse_usize(&field("tensors")?, "tensor count")?;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let line = lines
            .next()
            .ok_or_else(|| CliError::data("checkpoint manifest: truncated tensor index"))?;
        let mut parts = line.split_whitespace();
        let names: Vec<String> = parts
            .next()
            .ok_or_else(|| CliError::data("checkpoint manifest: tensor line missing names"))?
            .split(',')
            .map(String::from)
            .collect();
        let _shared = parts.next();
        let shape_str = parts
            .next()
            .ok_or_else(|| CliError::data("checkpoint manifest: tensor line missing shape"))?;
        let dtype = parts.next().unwrap_or("");
        if dtype != "f32" {
            return Err(CliError::data(format!("unsupported tensor dtype {dtype:?}")));
        }
        let offset = parse_usize(parts.next().unwrap_or(""), "tensor offset")?;
        let shape: Vec<usize> = shape_str
            .split('x')
            .map(|d| parse_usize(d, "tensor dim"))
            .collect::<CliResult<_>>()?;
        tensors.push(ManifestTensor { names, shape, offset });
    }

    let read_block = |offset: usize, len: usize| -> CliResult<Vec<f32>> {
        let end = offset + 4 * len;
        if end > blob.len() {
            return Err(CliError::data(format!(
                "checkpoint blob truncated: need {end} bytes, have {}",
                blob.len()
            )));
        }
        Ok(blob[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut param_bytes = 0usize;
    for t in &tensors {
        let len: usize = t.shape.iter().product();
        let data = read_block(t.offset, len)?;
        let id = store
            .register(&t.names[0], Tensor::from_vec(&t.shape, data))
            .map_err(|e| CliError::data(format!("checkpoint index: {e}")))?;
        for alias in &t.names[1..] {
            store
                .alias(alias, id)
                .map_err(|e| CliError::data(format!("checkpoint index: {e}")))?;
        }
        param_bytes = param_bytes.max(t.offset + 4 * len);
    }

    let model = Model::from_store(cfg, store)
        .map_err(|e| CliError::data(format!("checkpoint does not form a valid model: {e}")))?;

    let adam = if optimizer {
        let adam_line = lines
            .next()
            .ok_or_else(|| CliError::data("checkpoint manifest: missing adam_step"))?;
        let adam_step = parse_u64(
            adam_line.strip_prefix("adam_step").unwrap_or("").trim(),
            "adam step",
        )?;
        let mut offset = param_bytes;
        let mut read_moments = || -> CliResult<Vec<Tensor<f32>>> {
            let mut out = Vec::with_capacity(tensors.len());
            for t in &tensors {
                let len: usize = t.shape.iter().product();
                let data = read_block(offset, len)?;
                offset += 4 * len;
                out.push(Tensor::from_vec(&t.shape, data));
            }
            Ok(out)
        };
        let m = read_moments()?;
        let v = read_moments()?;
        Some(
            AdamState::from_parts(model.store(), adam_step, m, v)
                .map_err(|e| CliError::data(format!("checkpoint optimizer state: {e}")))?,
        )
    } else {
        None
    };

    Ok(Checkpoint { model, adam, step, seed, tokenizer_mode, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ambert_core::model::RunMode;
    use ambert_core::tokenizer::TokenSeqPair;

    fn demo_model(variant: Variant) -> Model<f32> {
        let cfg = ModelConfig {
            variant,
            layers: 2,
            hidden: 16,
            heads: 2,
            head_size: 8,
            ffn_inner: 32,
            max_positions: 24,
            fine_vocab_size: 20,
            coarse_vocab_size: 14,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            type_vocab: 2,
            granularity_embedding: true,
        };
        Model::init(cfg, 77).unwrap()
    }

    fn demo_pair() -> TokenSeqPair {
        TokenSeqPair {
            fine_ids: vec![2, 6, 7, 8, 3],
            coarse_ids: vec![2, 5, 6, 3],
            alignment: vec![(1, 3), (3, 4)],
            fine_segments: vec![0; 5],
            coarse_segments: vec![0; 4],
        }
    }

    #[test]
    fn round_trip_reproduces_forward_bitwise() {
        for variant in [Variant::Ambert, Variant::Combo, Variant::Hybrid] {
            let model = demo_model(variant);
            let pair = demo_pair();
            let (before, _) = model.forward(&pair, RunMode::eval()).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let prefix = dir.path().join("ckpt-1");
            let adam = AdamState::new(model.store());
            save(&prefix, &model, Some(&adam), 0, 9, Mode::Subword, &[(1, 0.5, 0.25, 0.75)])
                .unwrap();
            let loaded = load(&prefix).unwrap();
            assert_eq!(loaded.seed, 9);
            assert_eq!(loaded.history, vec![(1, 0.5, 0.25, 0.75)]);
            let (after, _) = loaded.model.forward(&pair, RunMode::eval()).unwrap();
            let a: Vec<u32> = before.fine_hidden().data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = after.fine_hidden().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "variant {variant}");
            let a: Vec<u32> =
                before.coarse_hidden().data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = after.coarse_hidden().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "variant {variant}");
        }
    }

    #[test]
    fn shared_tensors_are_stored_once_with_all_names() {
        let model = demo_model(Variant::Ambert);
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let params = model.store().total_params();
        save(&prefix, &model, None, 0, 0, Mode::Subword, &[]).unwrap();
        let blob_len = std::fs::metadata(blob_path(&prefix)).unwrap().len();
        assert_eq!(blob_len, params * 4, "blob holds each shared tensor once");
        let manifest = std::fs::read_to_string(manifest_path(&prefix)).unwrap();
        assert!(manifest
            .contains("encoder.0.attn.wq,fine.encoder.0.attn.wq,coarse.encoder.0.attn.wq"));
        let loaded = load(&prefix).unwrap();
        let f = loaded.model.store().lookup("fine.encoder.0.attn.wq").unwrap();
        let c = loaded.model.store().lookup("coarse.encoder.0.attn.wq").unwrap();
        assert_eq!(f, c);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = demo_model(Variant::Combo);
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        save(&prefix, &model, None, 0, 0, Mode::Subword, &[]).unwrap();
        let blob = std::fs::read(blob_path(&prefix)).unwrap();
        std::fs::write(blob_path(&prefix), &blob[..blob.len() - 8]).unwrap();
        assert!(load(&prefix).is_err());
    }
}
