use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hybrid_attn::checkpoint;
use hybrid_attn::commands::{self, CHECKPOINT_FILE, TRACE_FILE};
use hybrid_attn::{exit_code, ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "hybrid-attn",
    version,
    about = "Train, evaluate, and benchmark token-level hybrid attention models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of flat dotted `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set model.block.chunk=32` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Sets `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// learned, all_softmax, all_linear, or fraction:<p>.
    #[arg(long)]
    routing: Option<String>,
    /// Output directory; must already exist.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    /// `--set` entries followed by the dedicated flags, which win.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(s) = self.seed {
            o.push(format!("model.seed={s}"));
        }
        if let Some(p) = &self.precision {
            o.push(format!("model.precision=\"{p}\""));
        }
        if let Some(r) = &self.routing {
            o.push(format!("run.routing=\"{r}\""));
        }
        o
    }

    fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides())
    }

    fn checkpoint_config(&self, ck: &checkpoint::Checkpoint) -> Result<RunConfig> {
        commands::checkpoint_config(ck, self.config.as_deref(), &self.overrides())
    }
}

fn checkpoint_path(given: Option<PathBuf>, out: &Path) -> PathBuf {
    given.unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch; writes config.toml, metrics.jsonl, checkpoint.bin, routing_stats.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint; writes eval.json, trace.jsonl, routing_stats.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Continue a prompt from a checkpoint and print the new token ids.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt: Vec<u32>,
        #[arg(long, default_value_t = 16)]
        n_new: usize,
        /// 0 for greedy.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Count attention multiply-adds across routings and lengths, fit the
    /// cost model, and time prefill and decode; writes bench.jsonl and bench_fit.json.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Use trained parameters instead of a fresh init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip wall-clock timing.
        #[arg(long)]
        flops_only: bool,
    },
    /// Aggregate a routing trace into per (layer, group) softmax fractions.
    RouteStats {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/trace.jsonl`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path).map_err(|e| anyhow::Error::new(ConfigError(format!("{e:#}"))))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { common } => commands::train(&common.config()?, &common.out),
        Command::Eval { common, checkpoint } => {
            let ck = load_checkpoint(&checkpoint_path(checkpoint, &common.out))?;
            let cfg = common.checkpoint_config(&ck)?;
            commands::eval(&cfg, ck, &common.out)
        }
        Command::Generate {
            common,
            checkpoint,
            prompt,
            n_new,
            temperature,
        } => {
            let ck = load_checkpoint(&checkpoint_path(checkpoint, &common.out))?;
            let cfg = common.checkpoint_config(&ck)?;
            let tokens = commands::generate_cmd(&cfg, ck, &prompt, n_new, temperature)?;
            Ok(serde_json::to_string(
                &serde_json::json!({ "prompt": prompt, "generated": tokens }),
            )?)
        }
        Command::Bench {
            common,
            checkpoint,
            flops_only,
        } => {
            let (cfg, ck) = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(&p)?;
                    (common.checkpoint_config(&ck)?, Some(ck))
                }
                None => (common.config()?, None),
            };
            commands::bench(&cfg, ck, &common.out, flops_only)
        }
        Command::RouteStats { common, trace } => {
            let trace = trace.unwrap_or_else(|| common.out.join(TRACE_FILE));
            commands::route_stats(&trace, &common.out).context("route-stats")
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
