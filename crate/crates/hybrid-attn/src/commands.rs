//! Subcommand bodies. Each writes its artifacts under the output directory
//! and returns a short human-readable summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use hybrid_attn_core::block::LayerKind;
use hybrid_attn_core::flops::{fit_reports, CostFeatures, MacCounts};
use hybrid_attn_core::infer::{decode_step, generate, prefill, Footprint, Sampler};
use hybrid_attn_core::model::{
    init_params, model_forward, sequence_loss, ModelConfig, ModelOverrides, RoutingMode, Sample,
};
use hybrid_attn_core::real::Precision;
use hybrid_attn_core::stats::RoutingStats;
use hybrid_attn_core::task::{accuracy, gen_batch};
use hybrid_attn_core::train::{apply_step, batch_scale, sequence_grad_scratch, AdamW, SeqGrad};
use hybrid_attn_core::{ChunkRouting, ParamStore, Real, Route};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, StoredReal};
use crate::config::{ConfigError, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.jsonl";
pub const STATS_FILE: &str = "routing_stats.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const BENCH_FILE: &str = "bench.jsonl";
pub const BENCH_FIT_FILE: &str = "bench_fit.json";

/// Runs `f` monomorphized for the configured precision.
macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn require_dir(out: &Path) -> Result<()> {
    if !out.is_dir() {
        bail!("output directory {} does not exist", out.display());
    }
    Ok(())
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Builds the pool that bounds batch parallelism; `HYBRID_ATTN_THREADS`
/// caps its size.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HYBRID_ATTN_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            ConfigError(format!(
                "HYBRID_ATTN_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn overrides<T: Real>(cfg: &RunConfig) -> Result<ModelOverrides<T>> {
    Ok(ModelOverrides::routing(cfg.routing()?))
}

fn eval_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    Ok(gen_batch(
        &cfg.task,
        cfg.run.eval_offset,
        cfg.run.eval_sequences,
    )?)
}

/// Loss, accuracy, and routing over a set of samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub sequences: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub scored: usize,
    pub softmax_fraction: Vec<f64>,
    pub overall_softmax_fraction: f64,
}

struct EvalOutput<T> {
    report: EvalReport,
    stats: RoutingStats,
    routings: Vec<Vec<ChunkRouting<T>>>,
}

fn evaluate<T: Real + Send + Sync>(
    cfg: &RunConfig,
    params: &ParamStore<T>,
    samples: &[Sample],
) -> Result<EvalOutput<T>> {
    let ov = overrides::<T>(cfg)?;
    let per_seq = samples
        .par_iter()
        .map(|s| -> hybrid_attn_core::Result<_> {
            let (logits, saved) = model_forward(&cfg.model, params, &s.tokens, &ov)?;
            let acc = accuracy(&logits, &s.targets, &cfg.task)?;
            let loss = sequence_loss(&cfg.model, params, s, &ov)?;
            Ok((
                acc,
                loss.loss_sum.to_f64_lossy(),
                loss.count,
                saved.routings(),
            ))
        })
        .collect::<hybrid_attn_core::Result<Vec<_>>>()?;
    let (mut correct, mut scored, mut count) = (0, 0, 0);
    let mut loss_sum = 0.0;
    let mut stats = RoutingStats::default();
    let mut routings = Vec::with_capacity(per_seq.len());
    for ((c, n), l, k, r) in per_seq {
        correct += c;
        scored += n;
        loss_sum += l;
        count += k;
        stats.add(&r);
        routings.push(r);
    }
    let report = EvalReport {
        sequences: samples.len(),
        loss: if count == 0 {
            0.0
        } else {
            loss_sum / count as f64
        },
        accuracy: if scored == 0 {
            0.0
        } else {
            correct as f64 / scored as f64
        },
        correct,
        scored,
        softmax_fraction: stats.layer_fractions(),
        overall_softmax_fraction: stats.overall(),
    };
    Ok(EvalOutput {
        report,
        stats,
        routings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatsFile {
    /// `[layer][group]` fraction of softmax-routed chunks.
    pub fractions: Vec<Vec<f64>>,
    pub layer_fractions: Vec<f64>,
    pub overall: f64,
    pub softmax_chunks: Vec<Vec<usize>>,
    pub total_chunks: Vec<Vec<usize>>,
}

impl StatsFile {
    pub fn new(stats: &RoutingStats) -> Self {
        StatsFile {
            fractions: stats.fractions(),
            layer_fractions: stats.layer_fractions(),
            overall: stats.overall(),
            softmax_chunks: stats.softmax.clone(),
            total_chunks: stats.total.clone(),
        }
    }
}

/// Trains from scratch and writes the config echo, per-step metrics, the
/// checkpoint, and routing statistics over the evaluation set.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    require_dir(out)?;
    let echo = cfg.echo()?;
    std::fs::write(out.join(CONFIG_FILE), &echo)?;
    let pool = thread_pool()?;
    pool.install(|| with_precision!(cfg.model.precision, train_typed(cfg, out, &echo)))
}

fn train_typed<T: StoredReal + Send + Sync>(
    cfg: &RunConfig,
    out: &Path,
    echo: &str,
) -> Result<String> {
    let model = &cfg.model;
    let ov = overrides::<T>(cfg)?;
    let mut params = init_params::<T>(model)?;
    let mut opt = AdamW::new(&params);
    let mut metrics = jsonl_writer(&out.join(METRICS_FILE))?;
    let mut eval_metrics = if cfg.run.eval_every > 0 {
        Some(jsonl_writer(&out.join(EVAL_METRICS_FILE))?)
    } else {
        None
    };
    let samples = eval_samples(cfg)?;
    let batch = model.train.batch;
    let mut last_loss = f64::NAN;
    for step in 0..model.train.total_steps {
        let data = gen_batch(&cfg.task, step * batch as u64, batch)?;
        let (scale, count) = batch_scale::<T>(&data)?;
        let results = data
            .par_iter()
            .map(|s| sequence_grad_scratch(model, &params, s, scale, &ov))
            .collect::<hybrid_attn_core::Result<Vec<SeqGrad<T>>>>()?;
        let report = apply_step(model, &mut params, &mut opt, results, count)?;
        last_loss = report.loss;
        serde_json::to_writer(
            &mut metrics,
            &json!({
                "step": report.step,
                "loss": report.loss,
                "lr": report.lr,
                "grad_norm": report.grad_norm,
                "softmax_fraction": report.softmax_fraction,
            }),
        )?;
        metrics.write_all(b"\n")?;
        if let Some(w) = eval_metrics.as_mut() {
            let done = step + 1;
            if done % cfg.run.eval_every == 0 || done == model.train.total_steps {
                let e = evaluate(cfg, &params, &samples)?;
                serde_json::to_writer(&mut *w, &json!({ "step": done, "eval": e.report }))?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
        }
    }
    metrics.flush()?;
    checkpoint::save(
        &out.join(CHECKPOINT_FILE),
        echo,
        model.train.total_steps,
        &params,
    )?;
    let e = evaluate(cfg, &params, &samples)?;
    write_json(&out.join(STATS_FILE), &StatsFile::new(&e.stats))?;
    Ok(format!(
        "trained {} steps: final loss {last_loss:.4}, eval accuracy {:.4}, softmax fraction {:.3}",
        model.train.total_steps, e.report.accuracy, e.report.overall_softmax_fraction
    ))
}

/// Architecture fields that must agree between a checkpoint and the config
/// used to run it.
fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.vocab == b.vocab
        && a.n_layers == b.n_layers
        && a.layer_pattern == b.layer_pattern
        && a.block == b.block
        && a.mlp_mult == b.mlp_mult
}

/// Resolves the config for a checkpoint-consuming command: the checkpoint's
/// own config unless `explicit` is given, then `overrides` on top.
pub fn checkpoint_config(
    ck: &checkpoint::Checkpoint,
    explicit: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig> {
    let saved =
        RunConfig::parse(&ck.config_text, &[]).context("config stored in the checkpoint")?;
    let cfg = match explicit {
        Some(p) => RunConfig::load(Some(p), overrides)?,
        None => RunConfig::parse(&ck.config_text, overrides)?,
    };
    if !same_architecture(&saved.model, &cfg.model) {
        return Err(ConfigError(String::from(
            "checkpoint does not match the model config (vocab, layers, block, or mlp differ)",
        ))
        .into());
    }
    Ok(cfg)
}

fn load_params<T: StoredReal>(
    ck: checkpoint::Checkpoint,
    cfg: &ModelConfig,
) -> Result<ParamStore<T>> {
    let params = ck.params.into_store::<T>();
    let fresh = init_params::<T>(cfg)?;
    let shapes = |s: &ParamStore<T>| -> Vec<(String, Vec<usize>)> {
        s.iter()
            .map(|(n, p)| (n.to_string(), p.value.shape().to_vec()))
            .collect()
    };
    if shapes(&params) != shapes(&fresh) {
        return Err(ConfigError(String::from(
            "checkpoint parameters do not match the model config",
        ))
        .into());
    }
    Ok(params)
}

/// Evaluates a checkpoint; writes the report and a routing trace with one
/// row per (sequence, hybrid layer, group, chunk).
pub fn eval(cfg: &RunConfig, ck: checkpoint::Checkpoint, out: &Path) -> Result<String> {
    cfg.validate()?;
    require_dir(out)?;
    let pool = thread_pool()?;
    pool.install(|| with_precision!(cfg.model.precision, eval_typed(cfg, ck, out)))
}

fn eval_typed<T: StoredReal + Send + Sync>(
    cfg: &RunConfig,
    ck: checkpoint::Checkpoint,
    out: &Path,
) -> Result<String> {
    let params = load_params::<T>(ck, &cfg.model)?;
    let samples = eval_samples(cfg)?;
    let e = evaluate(cfg, &params, &samples)?;
    write_json(&out.join(EVAL_FILE), &e.report)?;
    write_json(&out.join(STATS_FILE), &StatsFile::new(&e.stats))?;
    let mut trace = jsonl_writer(&out.join(TRACE_FILE))?;
    for (seq, layers) in e.routings.iter().enumerate() {
        for (layer, r) in layers.iter().enumerate() {
            if cfg.model.layer_pattern[layer] != LayerKind::Hybrid {
                continue;
            }
            for g in 0..r.n_groups() {
                for t in 0..r.n_chunks() {
                    let scores = r.scores.as_ref().map(|s| {
                        let i = (g * r.n_chunks() + t) * 2;
                        [s.data()[i].to_f64_lossy(), s.data()[i + 1].to_f64_lossy()]
                    });
                    serde_json::to_writer(
                        &mut trace,
                        &TraceRow {
                            seq,
                            layer,
                            group: g,
                            chunk: t,
                            choice: r.get(g, t).index(),
                            scores,
                        },
                    )?;
                    trace.write_all(b"\n")?;
                }
            }
        }
    }
    trace.flush()?;
    Ok(format!(
        "accuracy {:.4} ({}/{}), loss {:.4}, softmax fraction {:.3}",
        e.report.accuracy,
        e.report.correct,
        e.report.scored,
        e.report.loss,
        e.report.overall_softmax_fraction
    ))
}

/// One routing decision. `choice` is 0 for softmax, 1 for linear; `scores`
/// are `[softmax, linear]` and absent when routing was forced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceRow {
    pub seq: usize,
    pub layer: usize,
    pub group: usize,
    pub chunk: usize,
    pub choice: usize,
    pub scores: Option<[f64; 2]>,
}

/// Aggregates a routing trace into per (layer, group) fractions.
pub fn route_stats(trace: &Path, out: &Path) -> Result<String> {
    require_dir(out)?;
    let text =
        std::fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let mut stats = RoutingStats::default();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row: TraceRow =
            serde_json::from_str(line).with_context(|| format!("{}:{}", trace.display(), i + 1))?;
        if row.choice > 1 {
            bail!("{}:{}: choice must be 0 or 1", trace.display(), i + 1);
        }
        for v in [&mut stats.softmax, &mut stats.total] {
            if v.len() <= row.layer {
                v.resize(row.layer + 1, Vec::new());
            }
            if v[row.layer].len() <= row.group {
                v[row.layer].resize(row.group + 1, 0);
            }
        }
        stats.total[row.layer][row.group] += 1;
        if row.choice == Route::Softmax.index() {
            stats.softmax[row.layer][row.group] += 1;
        }
    }
    let file = StatsFile::new(&stats);
    write_json(&out.join(STATS_FILE), &file)?;
    let mut summary = format!("overall softmax fraction {:.4}", file.overall);
    for (l, groups) in file.fractions.iter().enumerate() {
        if !groups.is_empty() {
            summary.push_str(&format!("\nlayer {l}: {groups:?}"));
        }
    }
    Ok(summary)
}

/// Continues `prompt` by `n_new` tokens from a checkpoint.
pub fn generate_cmd(
    cfg: &RunConfig,
    ck: checkpoint::Checkpoint,
    prompt: &[u32],
    n_new: usize,
    temperature: f64,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    with_precision!(
        cfg.model.precision,
        generate_typed(cfg, ck, prompt, n_new, temperature)
    )
}

fn generate_typed<T: StoredReal>(
    cfg: &RunConfig,
    ck: checkpoint::Checkpoint,
    prompt: &[u32],
    n_new: usize,
    temperature: f64,
) -> Result<Vec<u32>> {
    let params = load_params::<T>(ck, &cfg.model)?;
    let sampler = if temperature > 0.0 {
        Sampler::Temperature(temperature)
    } else {
        Sampler::Greedy
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    Ok(generate(
        &cfg.model,
        &params,
        prompt,
        n_new,
        sampler,
        &overrides::<T>(cfg)?,
        &mut rng,
    )?)
}

/// One (routing, length) row of the benchmark.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub routing: String,
    pub len: usize,
    pub counted: MacCounts,
    pub features: CostFeatures,
    pub predicted_attention: f64,
    pub relative_error: f64,
    pub prefill_ms: Option<f64>,
    pub decode_ms_median: Option<f64>,
    pub footprint: Option<Footprint>,
}

/// Routings the benchmark sweeps: the four fixed fractions, plus learned
/// when the config asks for it.
pub fn bench_routings(cfg: &RunConfig) -> Result<Vec<RoutingMode>> {
    let mut modes = vec![
        RoutingMode::AllLinear,
        RoutingMode::Fraction(0.25),
        RoutingMode::Fraction(0.5),
        RoutingMode::AllSoftmax,
    ];
    let chosen = cfg.routing()?;
    if !modes.contains(&chosen) {
        modes.push(chosen);
    }
    Ok(modes)
}

/// Counts multiply-adds per routing and length, fits the cost model, and
/// (unless `flops_only`) times prefill and decode. Parameters come from
/// the checkpoint when given, otherwise from a fresh init.
pub fn bench(
    cfg: &RunConfig,
    ck: Option<checkpoint::Checkpoint>,
    out: &Path,
    flops_only: bool,
) -> Result<String> {
    cfg.model.validate()?;
    require_dir(out)?;
    for &len in &cfg.run.bench_lengths {
        if len == 0 || len % cfg.model.block.chunk != 0 {
            return Err(ConfigError(format!(
                "bench length {len} is not a positive multiple of the chunk size {}",
                cfg.model.block.chunk
            ))
            .into());
        }
    }
    with_precision!(cfg.model.precision, bench_typed(cfg, ck, out, flops_only))
}

fn bench_typed<T: StoredReal>(
    cfg: &RunConfig,
    ck: Option<checkpoint::Checkpoint>,
    out: &Path,
    flops_only: bool,
) -> Result<String> {
    let model = &cfg.model;
    let params = match ck {
        Some(ck) => load_params::<T>(ck, model)?,
        None => init_params::<T>(model)?,
    };
    let max_len = cfg.run.bench_lengths.iter().copied().max().unwrap_or(0);
    let decode_steps = cfg.run.bench_decode_steps.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let tokens: Vec<u32> = (0..max_len + decode_steps)
        .map(|_| rng.gen_range(0..model.vocab as u32))
        .collect();
    let mut runs = Vec::new();
    let mut extra = Vec::new();
    for mode in bench_routings(cfg)? {
        let ov = ModelOverrides::<T>::routing(mode);
        for &len in &cfg.run.bench_lengths {
            let (_, saved) = model_forward(model, &params, &tokens[..len], &ov)?;
            let mut features = CostFeatures {
                softmax: 0.0,
                linear: 0.0,
            };
            for r in saved.routings() {
                features.add(&CostFeatures::from_routing(&r, model.block.chunk));
            }
            runs.push((len, saved.macs, features));
            let timing = if flops_only {
                None
            } else {
                Some(time_decode(
                    model,
                    &params,
                    &tokens[..len + decode_steps],
                    len,
                    &ov,
                )?)
            };
            extra.push((mode, timing));
        }
    }
    let (fit, reports) = fit_reports(runs)?;
    let mut w = jsonl_writer(&out.join(BENCH_FILE))?;
    let mut table = format!(
        "{:<14} {:>6} {:>14} {:>14} {:>8} {:>11} {:>11} {:>10}\n",
        "routing",
        "len",
        "attn_macs",
        "predicted",
        "rel_err",
        "prefill_ms",
        "decode_ms",
        "kv_values"
    );
    let mut worst: f64 = 0.0;
    for (r, (mode, timing)) in reports.iter().zip(extra) {
        worst = worst.max(r.relative_error());
        let row = BenchRow {
            routing: mode.to_string(),
            len: r.len,
            counted: r.counted,
            features: r.features,
            predicted_attention: r.predicted_attention,
            relative_error: r.relative_error(),
            prefill_ms: timing.map(|t| t.0),
            decode_ms_median: timing.map(|t| t.1),
            footprint: timing.map(|t| t.2),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
        let fmt = |v: Option<f64>| v.map_or_else(|| String::from("-"), |v| format!("{v:.3}"));
        table.push_str(&format!(
            "{:<14} {:>6} {:>14} {:>14.0} {:>8.4} {:>11} {:>11} {:>10}\n",
            row.routing,
            row.len,
            row.counted.attention(),
            row.predicted_attention,
            row.relative_error,
            fmt(row.prefill_ms),
            fmt(row.decode_ms_median),
            row.footprint
                .map_or_else(|| String::from("-"), |f| f.kv.to_string()),
        ));
    }
    w.flush()?;
    write_json(
        &out.join(BENCH_FIT_FILE),
        &json!({ "a": fit.a, "b": fit.b, "max_relative_error": worst }),
    )?;
    table.push_str(&format!(
        "fit: a = {:.6}, b = {:.6}, max relative error {:.4}",
        fit.a, fit.b, worst
    ));
    Ok(table)
}

/// Prefill time for `len` tokens, median per-token decode time over the
/// rest, and the footprint after prefill.
fn time_decode<T: Real>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    tokens: &[u32],
    len: usize,
    ov: &ModelOverrides<T>,
) -> Result<(f64, f64, Footprint)> {
    let t = Instant::now();
    let (mut state, _) = prefill(model, params, &tokens[..len], ov)?;
    let prefill_ms = t.elapsed().as_secs_f64() * 1e3;
    let footprint = state.footprint();
    let mut times = Vec::with_capacity(tokens.len() - len);
    for &tok in &tokens[len..] {
        let t = Instant::now();
        decode_step(model, params, &mut state, tok)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok((prefill_ms, times[times.len() / 2], footprint))
}

/// Default output directory.
pub fn default_out() -> PathBuf {
    PathBuf::from("out")
}
