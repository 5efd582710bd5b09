//! Run configuration: a TOML file with model, schedule, sampler, data,
//! train, and eval sections, plus `key=value` overrides. Unknown sections,
//! unknown keys, and type mismatches are rejected before any computation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::eval::Weighting;
use crate::pipeline::{GarmentTiming, PipelineOptions};
use crate::schedule::ScheduleConfig;
use crate::training::TrainingConfig;
use crate::unet::{AttentionMode, UNetConfig};

/// Sampling knobs for generation and try-on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct SamplerConfig {
    /// Number of deterministic sampler steps.
    pub steps: usize,
    /// Classifier-free guidance strength.
    pub guidance_scale: f64,
    /// Sampler stochasticity; 0 keeps it deterministic.
    pub eta: f64,
    /// Scale on the garment attention branch.
    pub garment_scale: f64,
    /// Timestep policy for the garment encoder.
    pub garment_timing: GarmentTiming,
    /// Drop garment K/V on the unconditional guidance pass.
    pub drop_garment: bool,
    /// Incoming masks mark the region to keep rather than to generate.
    pub masks_mark_keep: bool,
    /// How garment K/V enter self-attention.
    pub attention_mode: AttentionMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 25,
            guidance_scale: 3.0,
            eta: 0.0,
            garment_scale: 1.0,
            garment_timing: GarmentTiming::Matched,
            drop_garment: false,
            masks_mark_keep: false,
            attention_mode: AttentionMode::Asa,
        }
    }
}

impl SamplerConfig {
    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            garment_timing: self.garment_timing,
            drop_garment_on_uncond: self.drop_garment,
            masks_mark_keep: self.masks_mark_keep,
            garment_scale: self.garment_scale,
            eta: self.eta,
        }
    }
}

/// Where training records come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedural generator records built in-process.
    Toy,
    /// A JSONL manifest written by the synthesis engine.
    Manifest,
}

/// Dataset selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct DataConfig {
    pub source: DataSource,
    /// Manifest path, required when `source = "manifest"`.
    pub manifest: Option<String>,
    /// Number of generator records when `source = "toy"`.
    pub size: usize,
    /// Generator seed.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { source: DataSource::Toy, manifest: None, size: 8, seed: 11 }
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct EvalConfig {
    pub dataset_id: String,
    pub embedder_seed: u64,
    pub weighting: Weighting,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset_id: "toy".into(),
            embedder_seed: 0,
            weighting: Weighting::Linear,
        }
    }
}

/// The full run configuration. Every section is optional in the file and
/// falls back to its defaults; unknown sections are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "snake_case")]
pub struct RunConfig {
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WeftError::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            WeftError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    /// Serializes the resolved configuration, defaults included, for the
    /// reproducibility snapshot written next to run outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| WeftError::Config(format!("config serialization: {e}")))
    }

    /// Cross-field checks on top of per-section invariants.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        crate::schedule::NoiseSchedule::from_config(&self.schedule)?;
        self.train.validate()?;
        if self.sampler.steps == 0 {
            return Err(WeftError::Config("sampler.steps must be at least 1".into()));
        }
        if self.sampler.steps > self.schedule.steps {
            return Err(WeftError::Config(format!(
                "sampler.steps ({}) cannot exceed schedule.T ({})",
                self.sampler.steps, self.schedule.steps
            )));
        }
        if !(self.sampler.guidance_scale.is_finite() && self.sampler.guidance_scale >= 0.0) {
            return Err(WeftError::Config("sampler.guidance_scale must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sampler.eta) {
            return Err(WeftError::Config("sampler.eta must lie in [0, 1]".into()));
        }
        if !self.sampler.garment_scale.is_finite() {
            return Err(WeftError::Config("sampler.garment_scale must be finite".into()));
        }
        if self.data.source == DataSource::Manifest && self.data.manifest.is_none() {
            return Err(WeftError::Config(
                "data.source = \"manifest\" requires data.manifest".into(),
            ));
        }
        if self.data.source == DataSource::Toy && self.data.size == 0 {
            return Err(WeftError::Config("data.size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Short spellings for the most common override targets.
fn alias(key: &str) -> Option<&'static str> {
    match key {
        "stage" => Some("train.stage"),
        "max_steps" => Some("train.max_steps"),
        "seed" => Some("train.seed"),
        "steps" => Some("sampler.steps"),
        "guidance_scale" => Some("sampler.guidance_scale"),
        "T" => Some("schedule.T"),
        "cfg.drop_garment" => Some("sampler.drop_garment"),
        _ => None,
    }
}

fn parse_scalar(text: &str) -> toml::Value {
    if let Ok(b) = text.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = text.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = text.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(text.to_string())
}

/// Applies one `key=value` override. Keys are either aliases (`stage`,
/// `max_steps`, `seed`, `steps`, `guidance_scale`, `T`,
/// `cfg.drop_garment`) or dotted section paths (`train.learning_rate`).
/// Values are scalars; unknown keys and type mismatches are errors.
pub fn apply_override(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| WeftError::Config(format!("override '{spec}' must be key=value")))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() || value.is_empty() {
        return Err(WeftError::Config(format!("override '{spec}' must be key=value")));
    }
    let path: Vec<String> = alias(key)
        .unwrap_or(key)
        .split('.')
        .map(str::to_string)
        .collect();
    if path.len() < 2 {
        return Err(WeftError::Config(format!(
            "unknown override key '{key}'; use an alias or a dotted section path"
        )));
    }

    let mut root = toml::Value::try_from(&*cfg)
        .map_err(|e| WeftError::Config(format!("config reserialization: {e}")))?;
    let mut node = &mut root;
    for part in &path[..path.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(part.as_str()))
            .ok_or_else(|| WeftError::Config(format!("unknown override section '{part}'")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| WeftError::Config(format!("override key '{key}' is not a table entry")))?;
    table.insert(path.last().unwrap().clone(), parse_scalar(value));

    *cfg = root
        .try_into()
        .map_err(|e| WeftError::Config(format!("override '{spec}': {e}")))?;
    Ok(())
}

/// Applies a list of overrides in order.
pub fn apply_overrides(cfg: &mut RunConfig, specs: &[String]) -> Result<()> {
    for spec in specs {
        apply_override(cfg, spec)?;
    }
    Ok(())
}
