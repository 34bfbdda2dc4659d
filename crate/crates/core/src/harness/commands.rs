//! The commands behind the CLI. Each reads a [`RunConfig`], writes its
//! artifacts under `out_dir` and returns a one-line summary.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Command, RunConfig};
use super::eval::{evaluate, Decoded};
use super::metrics::Metrics;
use super::tasks::{token_accuracy, TaskKind, DIGITS};
use crate::corrupt::corrupt_region;
use crate::decode::reference::threshold_decode;
use crate::decode::{decode_sequence, write_jsonl, Sentinels, StepTrace, ThresholdConfig};
use crate::ebpo::{
    block_log_likelihoods, block_log_likelihoods_naive, estimate_log_ratio, train_ebpo_with, mean_reward,
    write_rl_csv, write_rollouts_jsonl, TimestepGrid,
};
use crate::error::{Error, Result};
use crate::layout::{encode_completion, encode_example, encode_prompt, parse_corpus, BlockLayout, Example};
use crate::model::train::{m2t_accuracy, train, write_loss_csv};
use crate::model::{grad_check, load_checkpoint, save_checkpoint, AttentionView, NetConfig, ToyNet};
use crate::vocab::{build_vocab, TokenId, Vocabulary};

/// What a command reports back to the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: String,
    /// False when an invariant check failed.
    pub passed: bool,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, passed: true }
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Decode => cmd_decode(cfg).map(|(_, o)| o),
        Command::Sweep => cmd_sweep(cfg).map(|(_, o)| o),
        Command::Rl => cmd_rl(cfg),
        Command::Check => cmd_check(cfg).map(|(_, o)| o),
    }
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(format!("{what} {} not found", path.display())))
    }
}

fn read_corpus(path: &Path) -> Result<Vec<Example>> {
    existing(path, "corpus")?;
    parse_corpus(&std::fs::read_to_string(path)?)
}

fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

/// Config and seed, embedded in every artifact.
fn provenance(cfg: &RunConfig) -> Value {
    json!({ "config": cfg, "seed": cfg.seed })
}

fn write_meta(csv: &Path, cfg: &RunConfig, columns: &[&str]) -> Result<()> {
    let mut meta = provenance(cfg);
    meta["columns"] = json!(columns);
    write_json(csv.with_extension("meta.json"), &meta)
}

/// Training examples and the text the vocabulary is built from.
fn training_set(cfg: &RunConfig) -> Result<(Vec<Example>, String)> {
    if let Some(path) = &cfg.corpus {
        let examples = read_corpus(path)?;
        let text = examples.iter().map(|e| format!("{}{}", e.prompt, e.completion)).collect();
        return Ok((examples, text));
    }
    match &cfg.task {
        Some(t) if t.kind != TaskKind::Memorize => Ok((t.training_examples()?, DIGITS.to_string())),
        _ => Err(Error::MissingInput("a corpus or a digit task is required for training".into())),
    }
}

/// Evaluation examples and the scorer that applies to them.
fn eval_set(cfg: &RunConfig) -> Result<(TaskKind, Vec<Example>)> {
    let kind = cfg.task.as_ref().map_or(TaskKind::Memorize, |t| t.kind);
    if let Some(path) = &cfg.prompts {
        existing(path, "prompt file")?;
        return Ok((kind, parse_corpus(&std::fs::read_to_string(path)?)?));
    }
    match (&cfg.task, &cfg.corpus) {
        (Some(t), _) if t.kind != TaskKind::Memorize => Ok((kind, t.examples()?)),
        (_, Some(path)) => Ok((TaskKind::Memorize, read_corpus(path)?)),
        _ => Err(Error::MissingInput("no prompt file, digit task or corpus to evaluate on".into())),
    }
}

fn load_model(cfg: &RunConfig) -> Result<(ToyNet, Vocabulary)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::MissingInput("no checkpoint configured".into()))?;
    existing(path, "checkpoint")?;
    let (net, header) = load_checkpoint(path)?;
    net.check_layout(&cfg.layout)?;
    Ok((net, header.vocab))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let (examples, text) = training_set(cfg)?;
    let vocab = build_vocab(&text)?;
    let encoded = examples
        .iter()
        .map(|e| encode_example(&vocab, &cfg.layout, e))
        .collect::<Result<Vec<_>>>()?;
    let mut net = ToyNet::init(cfg.model.net_config(vocab.size(), &cfg.layout), cfg.seed)?;
    let mut schedule = cfg.train.clone();
    schedule.seed = cfg.seed;
    let curve = train(&mut net, &vocab, &cfg.layout, &encoded, &schedule)?;
    let dir = out_dir(cfg)?;
    let loss_csv = dir.join("loss.csv");
    write_loss_csv(&loss_csv, &curve)?;
    write_meta(&loss_csv, cfg, &["step", "loss_total", "loss_m2t", "loss_t2t"])?;
    let last = curve.last().expect("at least one step");
    let accuracy = m2t_accuracy(&net, &vocab, &cfg.layout, &encoded)?;
    let mut meta = provenance(cfg);
    meta["final_loss"] = json!(last);
    meta["m2t_accuracy"] = json!(accuracy);
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt, &net, &vocab, meta)?;
    Ok(Outcome::ok(format!(
        "train: {} steps on {} examples, loss {:.4} (m2t {:.4}, t2t {:.4}), masked accuracy {:.3}, checkpoint {}",
        curve.len(),
        encoded.len(),
        last.total,
        last.m2t,
        last.t2t,
        accuracy,
        ckpt.display()
    )))
}

fn counters(m: &Metrics) -> (usize, usize, usize, usize) {
    (m.tokens_generated, m.forwards_used, m.edits_applied, m.blocks_decoded)
}

/// Decodes the evaluation set `cfg.repetitions` times; wall time is the mean.
fn timed_eval(
    net: &ToyNet,
    vocab: &Vocabulary,
    cfg: &RunConfig,
    threshold: &ThresholdConfig,
    kind: TaskKind,
    examples: &[Example],
) -> Result<(Metrics, Vec<Decoded>)> {
    let (mut metrics, decoded) = evaluate(net, vocab, cfg.layout, kind, examples, threshold, cfg.seed)?;
    let mut wall = metrics.wall_time;
    for _ in 1..cfg.repetitions {
        let (again, _) = evaluate(net, vocab, cfg.layout, kind, examples, threshold, cfg.seed)?;
        if counters(&again) != counters(&metrics) {
            return Err(Error::InvalidConfig("decode counters differ between repetitions".into()));
        }
        wall += again.wall_time;
    }
    let score = metrics.task_score;
    metrics = metrics.with_wall_time(wall / cfg.repetitions as f64);
    metrics.task_score = score;
    Ok((metrics, decoded))
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    prompt: &'a str,
    output: &'a str,
    score: f64,
    tokens_generated: usize,
    forwards_used: usize,
    edits_applied: usize,
}

/// Trace file for the `index`-th prompt of a decode run.
pub fn trace_path(out_dir: &Path, index: usize) -> PathBuf {
    out_dir.join("traces").join(format!("{index:04}.jsonl"))
}

pub fn cmd_decode(cfg: &RunConfig) -> Result<(Metrics, Outcome)> {
    let (net, vocab) = load_model(cfg)?;
    let (kind, examples) = eval_set(cfg)?;
    let threshold = cfg.threshold();
    let (metrics, decoded) = timed_eval(&net, &vocab, cfg, &threshold, kind, &examples)?;
    let dir = out_dir(cfg)?;
    std::fs::create_dir_all(dir.join("traces"))?;
    for (i, d) in decoded.iter().enumerate() {
        let mut f = BufWriter::new(std::fs::File::create(trace_path(dir, i))?);
        write_jsonl(&mut f, &d.output.traces)?;
        f.flush()?;
    }
    let prompts: Vec<PromptRecord> = examples
        .iter()
        .zip(&decoded)
        .map(|(e, d)| PromptRecord {
            prompt: &e.prompt,
            output: &d.text,
            score: d.score,
            tokens_generated: d.output.metrics.tokens_generated,
            forwards_used: d.output.metrics.forwards_used,
            edits_applied: d.output.metrics.edits_applied,
        })
        .collect();
    let mut doc = provenance(cfg);
    doc["threshold"] = json!(threshold);
    doc["metrics"] = json!(metrics);
    doc["prompts"] = json!(prompts);
    write_json(dir.join("metrics.json"), &doc)?;
    let summary = format!(
        "decode: {} prompts, {} tokens in {} forwards, tpf {:.3}, edits {}, score {:.3}, tps {:.0}",
        examples.len(),
        metrics.tokens_generated,
        metrics.forwards_used,
        metrics.tpf,
        metrics.edits_applied,
        metrics.task_score.unwrap_or(f64::NAN),
        metrics.tps
    );
    Ok((metrics, Outcome::ok(summary)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau_mask: f64,
    pub tau_edit: f64,
    pub tpf: f64,
    pub score: f64,
    pub edits: usize,
}

/// Rows sorted by TPF, ascending.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<(Vec<SweepRow>, Outcome)> {
    let points = cfg.sweep.points();
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let (net, vocab) = load_model(cfg)?;
    let (kind, examples) = eval_set(cfg)?;
    let base = cfg.threshold();
    let mut rows = Vec::with_capacity(points.len());
    for (tau_mask, tau_edit) in points {
        let threshold = ThresholdConfig {
            tau_mask,
            tau_edit,
            mode: crate::decode::Mode::Custom,
            ..base.clone()
        };
        let (m, _) = timed_eval(&net, &vocab, cfg, &threshold, kind, &examples)?;
        rows.push(SweepRow {
            tau_mask,
            tau_edit,
            tpf: m.tpf,
            score: m.task_score.unwrap_or(0.0),
            edits: m.edits_applied,
        });
    }
    rows.sort_by(|a, b| a.tpf.total_cmp(&b.tpf));
    let dir = out_dir(cfg)?;
    let csv = dir.join("sweep.csv");
    let mut f = BufWriter::new(std::fs::File::create(&csv)?);
    writeln!(f, "tau_mask,tau_edit,tpf,score,edits")?;
    for r in &rows {
        writeln!(f, "{},{},{},{},{}", r.tau_mask, r.tau_edit, r.tpf, r.score, r.edits)?;
    }
    f.flush()?;
    write_meta(&csv, cfg, &["tau_mask", "tau_edit", "tpf", "score", "edits"])?;
    let (lo, hi) = (&rows[0], &rows[rows.len() - 1]);
    let summary = format!(
        "sweep: {} points, tpf {:.3}..{:.3}, score at max tpf {:.3}, written to {}",
        rows.len(),
        lo.tpf,
        hi.tpf,
        hi.score,
        csv.display()
    );
    Ok((rows, Outcome::ok(summary)))
}

pub fn cmd_rl(cfg: &RunConfig) -> Result<Outcome> {
    let (mut net, vocab) = load_model(cfg)?;
    let (train_examples, _) = training_set(cfg)?;
    let (_, eval_examples) = eval_set(cfg)?;
    let layout = cfg.layout;
    let encode_prompts = |ex: &[Example]| -> Result<Vec<Vec<TokenId>>> {
        ex.iter().map(|e| encode_prompt(&vocab, &layout, &e.prompt)).collect()
    };
    let rl_examples = &train_examples[..cfg.rl.prompt_count.clamp(1, train_examples.len())];
    let prompts = encode_prompts(rl_examples)?;
    let eval_prompts = encode_prompts(&eval_examples)?;
    let mut references: HashMap<Vec<TokenId>, Vec<TokenId>> = HashMap::new();
    for e in rl_examples.iter().chain(&eval_examples) {
        let p = encode_prompt(&vocab, &layout, &e.prompt)?;
        references.entry(p).or_insert(encode_completion(&vocab, &layout, &e.completion)?);
    }
    let eos = vocab.eos_id();
    let reward = |prompt: &[TokenId], completion: &[TokenId]| -> std::result::Result<f64, String> {
        let reference = references.get(prompt).ok_or("prompt has no reference completion")?;
        Ok(token_accuracy(reference, completion, eos))
    };
    let sentinels = Sentinels::from(&vocab);
    let threshold = cfg.threshold();
    let measure = |net: &ToyNet| {
        mean_reward(
            net,
            sentinels,
            layout,
            &eval_prompts,
            &threshold,
            cfg.rl.rollout.temperature,
            cfg.rl.eval_samples,
            &reward,
            cfg.seed ^ 0x6576_616c,
        )
    };
    let before = measure(&net)?;
    let dir = out_dir(cfg)?;
    let mut rollouts = BufWriter::new(std::fs::File::create(dir.join("rollouts.jsonl"))?);
    let log = train_ebpo_with(
        &mut net,
        sentinels,
        layout,
        &prompts,
        cfg.rl.prompts_per_iter,
        &threshold,
        &cfg.rl.rollout,
        &cfg.rl.clip,
        &reward,
        cfg.rl.iterations,
        cfg.seed,
        &mut |iter, groups| write_rollouts_jsonl(&mut rollouts, iter, groups),
    )?;
    rollouts.flush()?;
    let after = measure(&net)?;
    let csv = dir.join("rl.csv");
    write_rl_csv(&csv, &log)?;
    write_meta(&csv, cfg, &["iter", "objective", "mean_reward", "clip_fraction"])?;
    let mut meta = provenance(cfg);
    meta["reward_before"] = json!(before);
    meta["reward_after"] = json!(after);
    write_json(dir.join("rl_summary.json"), &meta)?;
    save_checkpoint(dir.join("policy.json"), &net, &vocab, meta)?;
    let gain = if before > 0.0 { 100.0 * (after / before - 1.0) } else { f64::NAN };
    Ok(Outcome::ok(format!(
        "rl: {} iterations, mean reward {before:.3} -> {after:.3} ({gain:+.1}%)",
        log.len()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Checks one decode's trace: the prompt never changes, Γ and Δ are
/// disjoint, Γ only touches masked positions, Δ only committed ones, and the
/// number of masks never grows.
pub fn trace_invariants(
    prompt: &[TokenId],
    layout: &BlockLayout,
    mask: TokenId,
    traces: &[StepTrace],
) -> std::result::Result<(), String> {
    let mut prev: Vec<TokenId> = prompt.to_vec();
    prev.resize(layout.total_len(), mask);
    for t in traces {
        if t.tokens.len() != prev.len() || t.tokens[..layout.prompt_len] != prev[..layout.prompt_len] {
            return Err(format!("step {}: prompt changed", t.step));
        }
        if t.gamma.iter().any(|i| t.delta.contains(i)) {
            return Err(format!("step {}: unmasking and editing sets overlap", t.step));
        }
        if let Some(i) = t.gamma.iter().find(|&&i| prev[i] != mask || t.tokens[i] == mask) {
            return Err(format!("step {}: position {i} committed from a non-mask or to MASK", t.step));
        }
        if let Some(i) = t.delta.iter().find(|&&i| prev[i] == mask || t.tokens[i] == mask) {
            return Err(format!("step {}: position {i} edited while masked or to MASK", t.step));
        }
        let masks = |x: &[TokenId]| x.iter().filter(|&&v| v == mask).count();
        if masks(&t.tokens) > masks(&prev) {
            return Err(format!("step {}: mask count grew", t.step));
        }
        prev.clone_from(&t.tokens);
    }
    Ok(())
}

fn random_tokens(rng: &mut ChaCha8Rng, ids: &[TokenId], n: usize) -> Vec<TokenId> {
    (0..n).map(|_| ids[rng.gen_range(0..ids.len())]).collect()
}

const CHECK_PROMPTS: usize = 16;

fn check_decoding(net: &ToyNet, vocab: &Vocabulary, cfg: &RunConfig, prompts: &[Vec<TokenId>]) -> Result<(String, String)> {
    let sentinels = Sentinels::from(vocab);
    let base = cfg.threshold();
    let mut disjoint = Ok(());
    // the configured thresholds, plus a permissive variant that exercises editing
    let variants = [
        base.clone(),
        ThresholdConfig {
            tau_edit: base.tau_mask.min(0.5),
            mbe_enabled: cfg.layout.num_blocks > 1,
            ..base.clone()
        },
    ];
    let mut steps = 0;
    for t in &variants {
        for p in prompts {
            let out = decode_sequence(net, p, t, cfg.layout, sentinels, cfg.seed)?;
            steps += out.traces.len();
            if disjoint.is_ok() {
                disjoint = trace_invariants(p, &cfg.layout, sentinels.mask, &out.traces);
            }
        }
    }
    let unmasking = match disjoint {
        Ok(()) => format!("{steps} steps"),
        Err(e) => return Err(Error::InvalidConfig(e)),
    };
    let plain = ThresholdConfig {
        tau_edit: 1.0,
        mbe_enabled: false,
        ..base
    };
    for (k, p) in prompts.iter().enumerate() {
        let ours = decode_sequence(net, p, &plain, cfg.layout, sentinels, cfg.seed)?;
        let reference = threshold_decode(
            net,
            p,
            cfg.layout,
            plain.tau_mask,
            plain.max_steps_per_block,
            plain.fallback_commit,
            sentinels.mask,
            sentinels.eos,
            sentinels.pad,
        )?;
        if ours.tokens != reference.tokens
            || ours.traces != reference.traces
            || ours.metrics.forwards_used != reference.forwards_used
            || ours.metrics.tokens_generated != reference.tokens_generated
        {
            return Err(Error::InvalidConfig(format!("prompt {k} diverges from the edit-free reference")));
        }
    }
    Ok((unmasking, format!("{} prompts identical", prompts.len())))
}

/// Runs the invariant suite against the configured checkpoint, or a fresh
/// net when none is configured. A failing check is reported, not returned
/// as an error.
pub fn cmd_check(cfg: &RunConfig) -> Result<(Vec<CheckRow>, Outcome)> {
    let (net, vocab) = match &cfg.checkpoint {
        Some(_) => load_model(cfg)?,
        None => {
            let vocab = build_vocab(DIGITS)?;
            let net = ToyNet::init(cfg.model.net_config(vocab.size(), &cfg.layout), cfg.seed)?;
            (net, vocab)
        }
    };
    let layout = cfg.layout;
    let ids = vocab.regular_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompts: Vec<Vec<TokenId>> = (0..CHECK_PROMPTS)
        .map(|_| random_tokens(&mut rng, &ids, layout.prompt_len))
        .collect();
    let completion = random_tokens(&mut rng, &ids, layout.gen_len());
    let mut rows = Vec::new();
    let mut record = |name: &'static str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        rows.push(CheckRow { name, passed, detail });
    };

    let finite = net.all_finite();
    record(
        "finite parameters",
        Ok((finite, if finite { "all finite".into() } else { "divergence: non-finite parameter".into() })),
    );

    match check_decoding(&net, &vocab, cfg, &prompts) {
        Ok((a, b)) => {
            record("disjointness and monotone unmasking", Ok((true, a)));
            record("baseline equivalence", Ok((true, b)));
        }
        Err(e) => {
            record("disjointness and monotone unmasking", Err(Error::InvalidConfig(e.to_string())));
            record("baseline equivalence", Ok((false, "not reached".into())));
        }
    }

    let small = NetConfig {
        width: 8,
        heads: 2,
        ffn_width: 8,
        layers: 1,
        ..net.config.clone()
    };
    record(
        "gradient check",
        (|| {
            let probe = ToyNet::init(small, cfg.seed)?;
            let mut clean = prompts[0].clone();
            clean.extend(&completion);
            let pair = corrupt_region(&vocab, &clean, layout.block_range(0), 0.5, 0.25, cfg.seed)?;
            let report = grad_check(&probe, &pair, 0.5, AttentionView::BlockCausal, 200, cfg.seed)?;
            Ok((
                report.max_rel_error < 1e-4,
                format!("max relative error {:.2e} over {} params", report.max_rel_error, report.checked),
            ))
        })(),
    );

    let grid = TimestepGrid::materialize(
        &completion,
        vocab.mask_id(),
        &cfg.rl.rollout.timesteps,
        &cfg.rl.rollout.weights,
        cfg.seed,
    );
    record(
        "ratio identity",
        grid.as_ref().map_err(|e| Error::InvalidConfig(e.to_string())).and_then(|g| {
            let r = estimate_log_ratio(&net, &net, &prompts[0], &completion, g, vocab.mask_id())?;
            Ok((r == 0.0, format!("log ratio {r}")))
        }),
    );
    record(
        "vectorized likelihood",
        grid.as_ref().map_err(|e| Error::InvalidConfig(e.to_string())).and_then(|g| {
            let fast = block_log_likelihoods(&net, &prompts[0], &completion, g, vocab.mask_id())?;
            let slow = block_log_likelihoods_naive(&net, &prompts[0], &completion, g, vocab.mask_id())?;
            let diff = fast
                .iter()
                .flatten()
                .zip(slow.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((diff <= 1e-8, format!("max difference {diff:.2e}")))
        }),
    );

    let passed = rows.iter().all(|r| r.passed);
    let dir = out_dir(cfg)?;
    let mut doc = provenance(cfg);
    doc["checks"] = json!(rows);
    doc["passed"] = json!(passed);
    write_json(dir.join("check.json"), &doc)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut table = format!("{:width$}  result  detail\n", "check");
    for r in &rows {
        table.push_str(&format!(
            "{:width$}  {:6}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    table.push_str(&format!("check: {} passed, {failed} failed", rows.len() - failed));
    Ok((rows, Outcome { summary: table, passed }))
}
