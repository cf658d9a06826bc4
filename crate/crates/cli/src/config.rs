//! Run configuration: a TOML file with `[model]`, `[task]` and `[train]`
//! sections plus top-level `seed`, `output_dir` and `prune_plans`, and
//! `key=value` overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use sahr::model::{BlockKind, ModelConfig, NormPlacement};
use sahr::tasks::{TaskKind, TaskSpec};
use sahr::training::{AdamConfig, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SAHR_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub block_kind: String,
    pub norm: String,
    pub dropout_rate: f64,
    pub sahr_q: f64,
    pub sahr_q_encoder_self: Option<f64>,
    pub sahr_q_decoder_self: Option<f64>,
    pub sahr_q_decoder_inter: Option<f64>,
    pub lambda_ctc: f64,
    pub label_smoothing: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            d_model: m.d_model,
            d_k: m.d_k,
            d_v: m.d_v,
            d_ff: m.d_ff,
            conv_kernel: m.conv_kernel,
            block_kind: "transformer".into(),
            norm: "pre".into(),
            dropout_rate: m.dropout_rate,
            sahr_q: m.sahr_q,
            sahr_q_encoder_self: None,
            sahr_q_decoder_self: None,
            sahr_q_decoder_inter: None,
            lambda_ctc: m.lambda_ctc,
            label_smoothing: m.label_smoothing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: String,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub frames_per_token: usize,
    pub noise_std: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            kind: t.kind.as_str().into(),
            vocab_size: t.vocab_size,
            min_len: t.min_len,
            max_len: t.max_len,
            input_dim: t.input_dim,
            train_size: t.train_size,
            dev_size: t.dev_size,
            test_size: t.test_size,
            seed: t.seed,
            frames_per_token: t.frames_per_token,
            noise_std: t.noise_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_steps: Option<u64>,
    pub average_last: usize,
    pub target_dev_accuracy: Option<f64>,
    pub greedy_dev: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            lr_scale: t.lr_scale,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            max_steps: t.max_steps,
            average_last: t.average_last,
            target_dev_accuracy: t.target_dev_accuracy,
            greedy_dev: t.greedy_dev,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Prune plan files installed before training and evaluation.
    pub prune_plans: Vec<PathBuf>,
    pub model: ModelSection,
    pub task: TaskSection,
    pub train: TrainSection,
}

const TOP_KEYS: &[&str] = &["seed", "output_dir", "prune_plans"];
const MODEL_KEYS: &[&str] = &[
    "enc_layers",
    "dec_layers",
    "heads",
    "d_model",
    "d_k",
    "d_v",
    "d_ff",
    "conv_kernel",
    "block_kind",
    "norm",
    "dropout_rate",
    "sahr_q",
    "sahr_q_encoder_self",
    "sahr_q_decoder_self",
    "sahr_q_decoder_inter",
    "lambda_ctc",
    "label_smoothing",
];
const TASK_KEYS: &[&str] = &[
    "kind",
    "vocab_size",
    "min_len",
    "max_len",
    "input_dim",
    "train_size",
    "dev_size",
    "test_size",
    "seed",
    "frames_per_token",
    "noise_std",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "warmup_steps",
    "lr_scale",
    "beta1",
    "beta2",
    "adam_eps",
    "max_steps",
    "average_last",
    "target_dev_accuracy",
    "greedy_dev",
];

fn sections() -> [(&'static str, &'static [&'static str]); 3] {
    [("model", MODEL_KEYS), ("task", TASK_KEYS), ("train", TRAIN_KEYS)]
}

/// Resolves a dotted or bare key to `(section, key)`. A bare key names a
/// top-level field if there is one, otherwise the single section holding it.
fn resolve_key(key: &str) -> Result<(Option<&'static str>, String)> {
    if let Some((section, field)) = key.split_once('.') {
        let (name, keys) = sections()
            .into_iter()
            .find(|(n, _)| *n == section)
            .ok_or_else(|| anyhow!("unknown config section `{section}` in `{key}`"))?;
        if !keys.contains(&field) {
            bail!("unknown key `{field}` in section [{name}]");
        }
        return Ok((Some(name), field.to_string()));
    }
    if TOP_KEYS.contains(&key) {
        return Ok((None, key.to_string()));
    }
    let mut hits: Vec<Option<&'static str>> = Vec::new();
    for (name, keys) in sections() {
        if keys.contains(&key) {
            hits.push(Some(name));
        }
    }
    match hits[..] {
        [one] => Ok((one, key.to_string())),
        [] => bail!("unknown config key `{key}`"),
        _ => bail!("config key `{key}` is ambiguous; qualify it as <section>.{key}"),
    }
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides in order, so later ones win.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{o}` is not of the form key=value"))?;
        let (section, field) = resolve_key(key.trim())?;
        let value = parse_value(raw.trim());
        let target = match section {
            None => &mut *table,
            Some(s) => table
                .entry(s)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .ok_or_else(|| anyhow!("`{s}` must be a table"))?,
        };
        target.insert(field, value);
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().context("config is not valid TOML")?;
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text, overrides).with_context(|| format!("in config {}", path.display()))
    }

    /// TOML text that loads back to `self`, preceded by the overrides as comments.
    pub fn snapshot(&self, overrides: &[String]) -> Result<String> {
        let mut s = String::new();
        for o in overrides {
            s.push_str(&format!("# override: {o}\n"));
        }
        s.push_str(&toml::to_string(self).context("serializing config")?);
        Ok(s)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let block_kind = match m.block_kind.as_str() {
            "transformer" => BlockKind::Transformer,
            "conformer" => BlockKind::Conformer,
            other => bail!("model.block_kind: expected `transformer` or `conformer`, got `{other}`"),
        };
        let norm = match m.norm.as_str() {
            "pre" => NormPlacement::Pre,
            "none" => NormPlacement::None,
            other => bail!("model.norm: expected `pre` or `none`, got `{other}`"),
        };
        Ok(ModelConfig {
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            d_model: m.d_model,
            d_k: m.d_k,
            d_v: m.d_v,
            d_ff: m.d_ff,
            conv_kernel: m.conv_kernel,
            vocab_size: self.task.vocab_size,
            input_dim: self.task.input_dim,
            block_kind,
            norm,
            dropout_rate: m.dropout_rate,
            sahr_q: m.sahr_q,
            sahr_q_encoder_self: m.sahr_q_encoder_self,
            sahr_q_decoder_self: m.sahr_q_decoder_self,
            sahr_q_decoder_inter: m.sahr_q_decoder_inter,
            lambda_ctc: m.lambda_ctc,
            label_smoothing: m.label_smoothing,
        })
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let t = &self.task;
        let kind: TaskKind = t.kind.parse().map_err(|e| anyhow!("task.kind: {e}"))?;
        Ok(TaskSpec {
            kind,
            vocab_size: t.vocab_size,
            min_len: t.min_len,
            max_len: t.max_len,
            input_dim: t.input_dim,
            train_size: t.train_size,
            dev_size: t.dev_size,
            test_size: t.test_size,
            seed: t.seed,
            frames_per_token: t.frames_per_token,
            noise_std: t.noise_std,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            lr_scale: t.lr_scale,
            adam: AdamConfig {
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            max_steps: t.max_steps,
            average_last: t.average_last,
            target_dev_accuracy: t.target_dev_accuracy,
            greedy_dev: t.greedy_dev,
        }
    }

    /// Checks every field before any compute, naming the offending one.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?.validate().map_err(|e| anyhow!("[model] {e}"))?;
        self.task_spec()?.validate().map_err(|e| anyhow!("[task] {e}"))?;
        self.train_config().validate().map_err(|e| anyhow!("[train] {e}"))?;
        Ok(())
    }

    /// `output_dir` if set, otherwise `$SAHR_OUTPUT_ROOT/<name>` (default root `runs`).
    pub fn resolve_output_dir(&self, name: &str) -> PathBuf {
        match &self.output_dir {
            Some(d) => d.clone(),
            None => std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(name),
        }
    }
}
