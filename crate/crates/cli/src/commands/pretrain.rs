//! `pretrain`: masked-language-model pre-training with periodic
//! checkpoints, a structured training log, and exact resume.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ambert_core::model::Model;
use ambert_core::pretrain::{PretrainError, TrainExample, Trainer};
use ambert_core::rng::{rng_from_seed, sub_seed, uniform, uniform_index};
use ambert_core::tokenizer::Tokenizer;

use crate::checkpoint::{self, HistoryRow};
use crate::commands::{ensure_out_dir, load_vocab_pair, Stanza};
use crate::corpus::read_corpus;
use crate::error::{io_data, CliError, CliResult};
use crate::runconfig::RunConfig;

pub struct PretrainOpts {
    pub corpus: PathBuf,
    pub fine_vocab: PathBuf,
    pub coarse_vocab: PathBuf,
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
    pub preset: String,
    pub overrides: Vec<String>,
    pub steps: Option<u64>,
    pub seed: u64,
    pub log_every: u64,
    pub ckpt_every: u64,
    pub resume: Option<PathBuf>,
}

/// Resolves the effective config: preset, then the optional config file,
/// then `--set key=value` overrides, later assignments winning. The final
/// text goes through the strict parser, so unknown keys are still rejected.
pub fn resolve_config(opts: &PretrainOpts) -> CliResult<RunConfig> {
    let preset = match opts.preset.as_str() {
        "base" => RunConfig::default(),
        "desk" => RunConfig::desk(),
        other => return Err(CliError::usage(format!("unknown preset {other:?} (base|desk)"))),
    };
    let mut layered = preset.to_text();
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_data(&format!("reading config {}", path.display()), e))?;
        layered.push_str(&text);
        if !text.ends_with('\n') {
            layered.push('\n');
        }
    }
    for kv in &opts.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {kv:?}")))?;
        layered.push_str(&format!("{} = {}\n", key.trim(), value.trim()));
    }
    let mut latest: Vec<(String, String)> = Vec::new();
    for line in layered.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::data(format!("bad config line {line:?}")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if let Some(slot) = latest.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            latest.push((key, value));
        }
    }
    let mut deduped = String::new();
    for (k, v) in latest {
        deduped.push_str(&format!("{k} = {v}\n"));
    }
    RunConfig::parse(&deduped)
}

/// Builds the training examples: one per corpus line, or NSP pairs with
/// 50% true-next sampling when the flag is on.
pub fn build_examples(
    tokenizer: &Tokenizer<'_>,
    lines: &[String],
    cfg: &RunConfig,
    seed: u64,
) -> CliResult<Vec<TrainExample>> {
    let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(CliError::data("corpus has no non-empty lines"));
    }
    let mut examples = Vec::with_capacity(lines.len());
    if cfg.nsp {
        if lines.len() < 2 {
            return Err(CliError::data("NSP needs at least two corpus lines"));
        }
        for i in 0..lines.len() - 1 {
            let mut rng = rng_from_seed(sub_seed(seed, "nsp", i as u64));
            let is_next = uniform::<f64>(&mut rng) < 0.5;
            let b_idx = if is_next {
                i + 1
            } else {
                // Any line other than the true next.
                let mut pick = uniform_index(&mut rng, lines.len() - 1);
                if pick >= i + 1 {
                    pick += 1;
                }
                pick
            };
            let pair = tokenizer
                .encode(lines[i], Some(lines[b_idx]), cfg.max_fine_len, cfg.max_coarse_len)
                .map_err(|e| CliError::data(format!("line {}: {e}", i + 1)))?;
            examples.push(TrainExample { pair, nsp_label: Some(is_next as u32) });
        }
    } else {
        for (i, line) in lines.iter().enumerate() {
            let pair = tokenizer
                .encode(line, None, cfg.max_fine_len, cfg.max_coarse_len)
                .map_err(|e| CliError::data(format!("line {}: {e}", i + 1)))?;
            examples.push(TrainExample { pair, nsp_label: None });
        }
    }
    Ok(examples)
}

pub fn format_log_line(stats: &ambert_core::pretrain::StepStats, wall_ms: u128) -> String {
    let mut line = format!(
        "step={} lr={:.8} fine={:.6} coarse={:.6} total={:.6} wall_ms={}",
        stats.step, stats.lr, stats.fine_term, stats.coarse_term, stats.total, wall_ms
    );
    if let Some(nsp) = stats.nsp_term {
        line.push_str(&format!(" nsp={nsp:.6}"));
    }
    line
}

pub fn run(opts: &PretrainOpts) -> CliResult<()> {
    let cfg = resolve_config(opts)?;
    let (fine, coarse) = load_vocab_pair(&opts.fine_vocab, &opts.coarse_vocab)?;
    let corpus = read_corpus(&opts.corpus)?;
    if corpus.rejected_lines > 0 {
        eprintln!("rejected {} malformed line(s)", corpus.rejected_lines);
    }
    let tokenizer = Tokenizer::new(cfg.tokenizer_mode, &fine, &coarse);
    let examples = build_examples(&tokenizer, &corpus.lines, &cfg, opts.seed)?;
    ensure_out_dir(&opts.out_dir)?;

    let hyper = cfg.pretrain_hyper();
    let (mut trainer, mut history, seed) = match &opts.resume {
        Some(prefix) => {
            let ckpt = checkpoint::load(prefix)?;
            let expected = cfg.model_config(fine.len(), coarse.len());
            if ckpt.model.config() != &expected {
                return Err(CliError::data(format!(
                    "resume config mismatch: checkpoint built for a different model shape ({} layers, hidden {})",
                    ckpt.model.config().layers,
                    ckpt.model.config().hidden
                )));
            }
            let adam = ckpt.adam.ok_or_else(|| {
                CliError::data("checkpoint has no optimizer state; cannot resume")
            })?;
            let seed = ckpt.seed;
            let trainer = Trainer::from_parts(ckpt.model, adam, hyper, examples, seed);
            (trainer, ckpt.history, seed)
        }
        None => {
            let model_cfg = cfg.model_config(fine.len(), coarse.len());
            let model: Model<f32> = Model::init(model_cfg, opts.seed)
                .map_err(|e| CliError::data(e.to_string()))?;
            let trainer = Trainer::new(model, hyper, examples, opts.seed)
                .map_err(map_pretrain_err)?;
            (trainer, Vec::new(), opts.seed)
        }
    };

    let target_steps = opts.steps.unwrap_or(cfg.max_steps);
    let end_step = trainer.step_count() + target_steps;
    let log_path = opts.out_dir.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_data("opening train.log", e))?;

    let started = Instant::now();
    while trainer.step_count() < end_step {
        let step_start = Instant::now();
        let stats = trainer.step().map_err(map_pretrain_err)?;
        if !stats.total.is_finite() {
            // Leave the last periodic checkpoint as the most recent good one.
            return Err(CliError::numeric(format!(
                "non-finite loss at step {}; last good checkpoint retained in {}",
                stats.step,
                opts.out_dir.display()
            )));
        }
        let is_log_step = stats.step % opts.log_every == 0 || stats.step == end_step;
        if is_log_step {
            let line = format_log_line(&stats, step_start.elapsed().as_millis());
            println!("{line}");
            writeln!(log, "{line}").map_err(|e| io_data("writing train.log", e))?;
            history.push((stats.step, stats.fine_term, stats.coarse_term, stats.total));
        }
        if stats.step % opts.ckpt_every == 0 || stats.step == end_step {
            save_checkpoint(&opts.out_dir, &trainer, seed, cfg.tokenizer_mode, &history)?;
        }
    }

    let mut stanza = Stanza::new("pretrain", seed);
    stanza.push("corpus_sha256", corpus.sha256);
    stanza.push_digest("config_sha256", cfg.to_text().as_bytes());
    stanza.push("steps", trainer.step_count().to_string());
    stanza.push("wall_s", started.elapsed().as_secs().to_string());
    stanza.write(&opts.out_dir)?;
    println!(
        "finished at step {} ({} examples); checkpoints under {}",
        trainer.step_count(),
        trainer.hyper().batch_size,
        opts.out_dir.display()
    );
    Ok(())
}

fn save_checkpoint(
    out_dir: &Path,
    trainer: &Trainer<f32>,
    seed: u64,
    mode: ambert_core::tokenizer::Mode,
    history: &[HistoryRow],
) -> CliResult<()> {
    let step = trainer.step_count();
    let prefix = out_dir.join(format!("ckpt-{step}"));
    checkpoint::save(&prefix, trainer.model(), Some(trainer.adam_state()), step, seed, mode, history)?;
    checkpoint::save(
        &out_dir.join("ckpt-latest"),
        trainer.model(),
        Some(trainer.adam_state()),
        step,
        seed,
        mode,
        history,
    )
}

pub fn map_pretrain_err(e: PretrainError) -> CliError {
    match e {
        PretrainError::Optim(ambert_core::optim::OptimError::NonFiniteGradient { name }) => {
            CliError::numeric(format!("non-finite gradient for parameter {name:?}"))
        }
        other => CliError::data(other.to_string()),
    }
}
