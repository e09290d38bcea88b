//! The run configuration: a TOML document with one section per concern,
//! every key overridable from the command line as `--section.key value`.

use std::path::{Path, PathBuf};

use ibp_core::net::{ArchSpec, InitScheme, LayerSpec};
use ibp_core::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub data: Option<DataConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainSection>,
    pub sched: Option<SchedSection>,
    pub eval: Option<EvalSection>,
    pub audit: Option<AuditConfig>,
    pub gradcheck: Option<GradcheckConfig>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunSection {
    #[serde(default)]
    pub precision: Precision,
    /// Use the data-parallel kernels; results are identical either way.
    #[serde(default = "yes")]
    pub parallel: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            parallel: true,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// MNIST IDX files in `dir`. Training uses the first `train-limit`
    /// training images; the epoch-end evaluation uses the first
    /// `eval-limit` test images and the final evaluation the first
    /// `test-limit` (all when absent).
    #[serde(rename_all = "kebab-case")]
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        #[serde(default = "default_eval_limit")]
        eval_limit: usize,
        test_limit: Option<usize>,
    },
    /// Gaussian blobs; the test split uses an independent stream.
    #[serde(rename_all = "kebab-case")]
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        test_per_class: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_eval_limit() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelConfig {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub full_bn: bool,
    pub init: InitScheme,
    /// Halve the weights consuming each residual sum after initialization.
    #[serde(default = "yes")]
    pub residual_calibrate: bool,
}

impl ModelConfig {
    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            input: self.input.clone(),
            layers: self.layers.clone(),
            full_bn: self.full_bn,
        }
    }
}

/// Optimization settings; the radius schedule lives in [`SchedSection`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainSection {
    #[serde(default)]
    pub epochs_zero: usize,
    pub epochs_increase: usize,
    pub epochs_final: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "half")]
    pub lambda0: f64,
    #[serde(default = "half")]
    pub tau: f64,
    pub eps_test: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_lr() -> f64 {
    5e-4
}

fn default_lr_decay() -> f64 {
    0.2
}

fn default_clip() -> f64 {
    10.0
}

fn half() -> f64 {
    0.5
}

fn default_eval_batch() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SchedSection {
    /// Training radius `ε_t` reached at the end of the warmup.
    pub eps_target: f64,
    #[serde(default = "default_exp_fraction")]
    pub exp_fraction: f64,
    #[serde(default = "default_start_factor")]
    pub start_factor: f64,
}

fn default_exp_fraction() -> f64 {
    0.25
}

fn default_start_factor() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub eps: Vec<f64>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AuditConfig {
    #[serde(default = "all_schemes")]
    pub schemes: Vec<InitScheme>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_fan_ins")]
    pub fan_ins: Vec<usize>,
    /// Output rows per sampled weight matrix.
    #[serde(default = "default_rows")]
    pub rows: usize,
    #[serde(default)]
    pub seed: u64,
    /// Untrained networks per scheme for the tightness profile (0 skips it).
    #[serde(default = "default_profile_seeds")]
    pub profile_seeds: usize,
    #[serde(default = "default_profile_batch")]
    pub profile_batch: usize,
    #[serde(default = "default_profile_eps")]
    pub profile_eps: f64,
}

fn all_schemes() -> Vec<InitScheme> {
    InitScheme::ALL.to_vec()
}

fn default_trials() -> usize {
    100
}

fn default_fan_ins() -> Vec<usize> {
    vec![27, 576, 1152, 32768]
}

fn default_rows() -> usize {
    16
}

fn default_profile_seeds() -> usize {
    10
}

fn default_profile_batch() -> usize {
    2
}

fn default_profile_eps() -> f64 {
    2.0 / 255.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GradcheckConfig {
    /// Widths of the MLP, input first.
    pub dims: Vec<usize>,
    #[serde(default = "yes")]
    pub full_bn: bool,
    #[serde(default)]
    pub init: Option<InitScheme>,
    pub eps: f64,
    pub eps_target: f64,
    #[serde(default = "half")]
    pub lambda0: f64,
    #[serde(default = "half")]
    pub tau: f64,
    #[serde(default = "default_gc_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Coordinates probed per parameter tensor; absent probes all.
    pub per_param: Option<usize>,
    /// Test fixture: adds a term that changes gradients but not values,
    /// emulating a broken backward rule. The check must then fail.
    #[serde(default)]
    pub inject_fault: bool,
}

fn default_gc_batch() -> usize {
    8
}

fn default_tolerance() -> f64 {
    1e-4
}

fn default_step() -> f64 {
    1e-5
}

impl RunConfig {
    pub fn data(&self) -> CliResult<&DataConfig> {
        self.data.as_ref().ok_or_else(|| missing("data"))
    }

    pub fn model(&self) -> CliResult<&ModelConfig> {
        self.model.as_ref().ok_or_else(|| missing("model"))
    }

    /// Merges `[train]` and `[sched]` into the trainer's configuration.
    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = self.train.as_ref().ok_or_else(|| missing("train"))?;
        let s = self.sched.as_ref().ok_or_else(|| missing("sched"))?;
        let cfg = TrainConfig {
            epochs_zero: t.epochs_zero,
            epochs_increase: t.epochs_increase,
            epochs_final: t.epochs_final,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay: t.lr_decay,
            milestones: t.milestones.clone(),
            clip_norm: t.clip_norm,
            lambda0: t.lambda0,
            tau: t.tau,
            eps_train: s.eps_target,
            eps_test: t.eps_test,
            exp_fraction: s.exp_fraction,
            start_factor: s.start_factor,
            seed: t.seed,
            shuffle: t.shuffle,
            eval_batch_size: t.eval_batch_size,
            adam: t.adam,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses a document and applies `overrides` (dotted path, raw value).
    pub fn parse(text: &str, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for (path, raw) in overrides {
            apply_override(&mut table, path, raw)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing [{section}] section"))
}

/// Interprets `raw` as a TOML value (number, boolean, array, inline table,
/// quoted string), falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> CliResult<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("override `--{path}` must name a section and a key")));
    }
    let (last, parents) = keys.split_last().expect("at least two keys");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("`{k}` in `--{path}` is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw));
    Ok(())
}
