//! Run configuration: flat dotted `key = value` text, `--set` overrides, and
//! an echo that parses back to the same config.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hybrid_attn_core::model::{ModelConfig, RoutingMode};
use hybrid_attn_core::task::TaskSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Options that belong to the run rather than the model or the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Routing override: `learned`, `all_softmax`, `all_linear`, `fraction:<p>`.
    pub routing: String,
    /// Evaluate every this many steps (0 disables).
    pub eval_every: u64,
    /// Sequences per evaluation.
    pub eval_sequences: usize,
    /// Stream offset of the evaluation samples, kept apart from training.
    pub eval_offset: u64,
    /// Sequence lengths for `bench`.
    pub bench_lengths: Vec<usize>,
    /// Decode steps timed per length in `bench` (median reported).
    pub bench_decode_steps: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            routing: String::from("learned"),
            eval_every: 0,
            eval_sequences: 16,
            eval_offset: 1 << 40,
            bench_lengths: vec![256, 512, 1024, 2048],
            bench_decode_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub run: RunOptions,
}

/// Which error class a failure belongs to; decides the exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    pub fn routing(&self) -> Result<RoutingMode> {
        self.run
            .routing
            .parse::<RoutingMode>()
            .map_err(|e| ConfigError(e.to_string()).into())
    }

    /// Checks cross-field invariants (each field's own range is checked by
    /// the core validators).
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: hybrid_attn_core::Error| anyhow::Error::new(ConfigError(e.to_string()));
        self.model.validate().map_err(wrap)?;
        self.task.validate().map_err(wrap)?;
        self.routing()?;
        if self.model.vocab < self.task.vocab() {
            return Err(ConfigError(format!(
                "model.vocab {} is smaller than the task vocabulary {}",
                self.model.vocab,
                self.task.vocab()
            ))
            .into());
        }
        if self.task.seq_len != self.model.train.seq_len {
            return Err(ConfigError(format!(
                "task.seq_len {} differs from model.train.seq_len {}",
                self.task.seq_len, self.model.train.seq_len
            ))
            .into());
        }
        if self.run.eval_sequences == 0 {
            return Err(ConfigError(String::from("run.eval_sequences must be positive")).into());
        }
        Ok(())
    }

    /// Parses flat dotted text plus `key=value` overrides, applied in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError(format!("config syntax: {e}")))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{o}`")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("config: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(|e| ConfigError(format!("{e:#}")))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Every field as one sorted `dotted.key = value` line.
    pub fn echo(&self) -> Result<String> {
        let value = Value::try_from(self).context("serializing config")?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        Ok(out)
    }
}

/// A TOML literal when it parses as one, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(ConfigError(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!(ConfigError(format!("`{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, sub) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, sub, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}
