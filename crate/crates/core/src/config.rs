//! Experiment configuration: TOML (or JSON) schema, dotted-key overrides and hashing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::data::{PartitionScheme, SyntheticTask};
use crate::error::{Error, Result};
use crate::latency::ComputeTerm;
use crate::learners::LearnerKind;
use crate::scheduler::SchedulerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    pub devices: usize,
    pub radius_km: f64,
    pub min_distance_km: f64,
    pub tx_power_dbm: f64,
    /// Mean device compute speed `f_k` in FLOP/s.
    pub flops: f64,
    /// Relative spread of `f_k`: each device draws uniformly from `flops·[1 − s, 1 + s]`.
    #[serde(default)]
    pub flops_spread: f64,
    /// Defaults to a value derived from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadConfig {
    /// Quantization bits per parameter `q`.
    pub bits_per_element: u32,
    /// FLOPs per sample for one gradient evaluation `C`.
    pub flops_per_sample: f64,
    /// Transmitted parameter count `S`; defaults to the learner's parameter count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub subsample: usize,
    /// Keep only these labels (remapped to `0..`), or to `−1/+1` when exactly two are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training plus held-out samples for synthetic tasks.
    pub total_samples: usize,
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSource>,
    pub partition: PartitionScheme,
    /// Explicit per-device training sample counts (iid partition only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    /// Seed of generation and the held-out split; defaults to a value derived from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Defaults to a value derived from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { eta: f64 },
    /// `η^t = χ/(t + ν)` for rounds `t = 1, 2, …`.
    Diminishing { chi: f64, nu: f64 },
}

impl LrSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match *self {
            LrSchedule::Constant { eta } => eta,
            LrSchedule::Diminishing { chi, nu } => chi / (round as f64 + nu),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { eta } => eta >= 0.0 && eta.is_finite(),
            LrSchedule::Diminishing { chi, nu } => chi > 0.0 && nu > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                field: "trainer.lr".into(),
                reason: format!("invalid schedule {self:?}"),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub rounds: usize,
    pub lr: LrSchedule,
    /// Stop once held-out accuracy stays at or above this for `eval_every` consecutive evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
    #[serde(default)]
    pub compute_term: ComputeTerm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Everything needed to run one experiment for a list of seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub fleet: FleetConfig,
    pub channel: ChannelConfig,
    pub payload: PayloadConfig,
    pub learner: LearnerKind,
    pub data: DataConfig,
    pub scheduler: SchedulerConfig,
    pub trainer: TrainerConfig,
    pub output: OutputConfig,
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn from_str_any(text: &str) -> Result<Self> {
        let value = parse_value(text)?;
        Self::from_value(value)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Loads a file and applies `key.path=value` overrides before validation.
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
        Self::parse_with_overrides(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses `text`, applies overrides, resolves relative data paths against `base`, then validates.
    pub fn parse_with_overrides(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut value = parse_value(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err("config", e.to_string()))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(idx) = &mut self.data.idx {
            for p in [&mut idx.images, &mut idx.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err("config", e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.fleet;
        if f.devices == 0 {
            return Err(cfg_err("fleet.devices", "must be positive"));
        }
        if !(f.radius_km > f.min_distance_km && f.min_distance_km >= 0.0) {
            return Err(cfg_err("fleet.radius_km", "need 0 <= min_distance_km < radius_km"));
        }
        if !(f.flops > 0.0) || !(0.0..1.0).contains(&f.flops_spread) {
            return Err(cfg_err("fleet.flops", "need flops > 0 and 0 <= flops_spread < 1"));
        }
        self.channel
            .validate()
            .map_err(|e| cfg_err("channel", e.to_string()))?;
        if self.payload.bits_per_element == 0 || !(self.payload.flops_per_sample >= 0.0) {
            return Err(cfg_err("payload", "bits_per_element > 0 and flops_per_sample >= 0 required"));
        }
        match (&self.data.synthetic, &self.data.idx) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(cfg_err("data", "exactly one of data.synthetic and data.idx must be set"))
            }
            (_, Some(idx)) => {
                for p in [&idx.images, &idx.labels] {
                    if !p.exists() {
                        return Err(cfg_err("data.idx", format!("{} does not exist", p.display())));
                    }
                }
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(cfg_err("data.test_fraction", "must lie in [0, 1)"));
        }
        if let Some(sizes) = &self.data.sizes {
            if sizes.len() != f.devices {
                return Err(cfg_err("data.sizes", format!("{} sizes for {} devices", sizes.len(), f.devices)));
            }
        }
        if let LearnerKind::MultinomialLogistic { classes } = self.learner {
            if classes < 2 {
                return Err(cfg_err("learner.classes", "at least two classes"));
            }
        }
        self.scheduler
            .validate(f.devices)
            .map_err(|e| cfg_err("scheduler", e.to_string()))?;
        let t = &self.trainer;
        if t.rounds == 0 || t.eval_every == 0 {
            return Err(cfg_err("trainer", "rounds and eval_every must be positive"));
        }
        t.lr.validate()?;
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "at least one seed"));
        }
        Ok(())
    }
}

fn parse_value(text: &str) -> Result<toml::Value> {
    if text.trim_start().starts_with('{') {
        let json: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            cfg_err(&format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        toml::Value::try_from(json).map_err(|e| cfg_err("config", e.to_string()))
    } else {
        text.parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| cfg_err("config", e.to_string()))
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value`, creating intermediate tables as needed.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(assignment, "override must look like key.path=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(cfg_err(key, "empty key segment"));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| cfg_err(key, format!("`{part}` is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| cfg_err(key, "parent is not a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

/// The shipped default experiment.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_str_any(DEFAULT_CONFIG).expect("shipped default config parses")
    }
}
