//! Flat JSON experiment configuration.
//!
//! Every key is listed in [`ExperimentConfig`]; unknown keys are rejected and
//! `key=value` overrides are type-checked by re-deserializing the merged
//! document.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::objectives::{ContrastConfig, LossWeights};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Manifest used during warm-up instead of `manifest`.
    pub warmup_manifest: Option<PathBuf>,
    /// Manifest used during joint training instead of `manifest`.
    pub joint_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub layers_per_resolution: usize,
    pub middle_attention_layers: usize,
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    pub group_norm_groups: usize,
    pub precision: Precision,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub decode_steps: usize,
    pub invert_steps: usize,

    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub per_class: usize,
    pub k: usize,
    pub tau: f64,
    pub tau_pred: f64,
    pub weight_diffusion: f64,
    pub weight_contrast: f64,
    pub weight_prediction: f64,
    pub freeze_diffusion_in_phase2: bool,
    pub optimizer: String,
    pub learning_rate: f64,
    pub grad_clip: f64,

    pub seed: u64,
    pub device: String,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub log_wall_time: bool,
    pub explain_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ExperimentConfig {
    /// Full-size setting: 64x64 inputs, 340 warm-up and 500 joint epochs.
    pub fn full() -> Self {
        let m = ModelConfig::full();
        Self {
            manifest: None,
            warmup_manifest: None,
            joint_manifest: None,
            output_dir: PathBuf::from("runs/default"),
            image_size: m.image_size,
            base_channels: m.base_channels,
            channel_multipliers: m.channel_multipliers,
            layers_per_resolution: m.layers_per_resolution,
            middle_attention_layers: m.middle_attention_layers,
            latent_dim: m.latent_dim,
            time_embed_dim: m.time_embed_dim,
            group_norm_groups: m.group_norm_groups,
            precision: Precision::F32,
            diffusion_steps: m.diffusion_steps,
            beta_start: 1e-4,
            beta_end: 0.02,
            decode_steps: 50,
            invert_steps: 50,
            warmup_epochs: 340,
            joint_epochs: 500,
            per_class: 16,
            k: 7,
            tau: 0.5,
            tau_pred: 0.1,
            weight_diffusion: 1.0,
            weight_contrast: 1.0,
            weight_prediction: 1.0,
            freeze_diffusion_in_phase2: false,
            optimizer: "adam".into(),
            learning_rate: 1e-4,
            grad_clip: 1.0,
            seed: 0,
            device: "cpu".into(),
            checkpoint_every: 10,
            eval_every: 10,
            log_wall_time: true,
            explain_k: 3,
        }
    }

    /// Small CPU-sized setting for 32x32 synthetic data.
    pub fn toy() -> Self {
        let m = ModelConfig::toy();
        Self {
            image_size: m.image_size,
            base_channels: m.base_channels,
            channel_multipliers: m.channel_multipliers,
            layers_per_resolution: m.layers_per_resolution,
            middle_attention_layers: m.middle_attention_layers,
            latent_dim: m.latent_dim,
            time_embed_dim: m.time_embed_dim,
            group_norm_groups: m.group_norm_groups,
            diffusion_steps: m.diffusion_steps,
            // rescaled so that T=200 still ends near pure noise
            beta_start: 5e-4,
            beta_end: 0.1,
            decode_steps: 20,
            invert_steps: 20,
            warmup_epochs: 30,
            joint_epochs: 50,
            learning_rate: 1e-3,
            checkpoint_every: 10,
            eval_every: 10,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected full or toy)"))),
        }
    }

    /// Parses a JSON document. Keys missing from the document take the value
    /// of the preset named by its optional `"preset"` key (default `full`).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let preset = match map.remove("preset") {
            None => Self::full(),
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        let mut merged = preset.to_value();
        for (key, v) in map {
            merged.insert(key, v);
        }
        Self::from_value(merged)
    }

    /// Loads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.manifest, &mut config.warmup_manifest, &mut config.joint_manifest]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    fn to_value(&self) -> serde_json::Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(map) => map,
            _ => unreachable!("config is a struct"),
        }
    }

    fn from_value(map: serde_json::Map<String, Value>) -> Result<Self> {
        let config: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Applies `key=value`. The value is read as JSON when it parses as JSON
    /// and as a bare string otherwise.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut map = self.to_value();
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = Self::from_value(map).map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.optimizer != "adam" {
            return fail(format!("unsupported optimizer {:?} (only adam)", self.optimizer));
        }
        if self.device != "cpu" {
            return fail(format!("unsupported device {:?} (only cpu)", self.device));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0) {
            return fail(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.per_class < 2 {
            return fail("per_class must be at least 2".into());
        }
        if self.k == 0 || self.k > 2 * self.per_class - 1 {
            return fail(format!(
                "k={} must lie in [1, {}] for batches of {} per class",
                self.k,
                2 * self.per_class - 1,
                self.per_class
            ));
        }
        for (key, steps) in [("decode_steps", self.decode_steps), ("invert_steps", self.invert_steps)] {
            if steps == 0 || steps > self.diffusion_steps {
                return fail(format!("{key} must lie in [1, {}]", self.diffusion_steps));
            }
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return fail("checkpoint_every and eval_every must be at least 1".into());
        }
        if self.explain_k == 0 {
            return fail("explain_k must be at least 1".into());
        }
        for (name, w) in [
            ("weight_diffusion", self.weight_diffusion),
            ("weight_contrast", self.weight_contrast),
            ("weight_prediction", self.weight_prediction),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!("{name} must be non-negative, got {w}"));
            }
        }
        self.contrast().validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            layers_per_resolution: self.layers_per_resolution,
            middle_attention_layers: self.middle_attention_layers,
            latent_dim: self.latent_dim,
            time_embed_dim: self.time_embed_dim,
            group_norm_groups: self.group_norm_groups,
            diffusion_steps: self.diffusion_steps,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            tau_pred: self.tau_pred,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            diffusion: self.weight_diffusion,
            contrast: self.weight_contrast,
            prediction: self.weight_prediction,
        }
    }

    /// Manifest for a training phase, honoring the per-phase overrides.
    pub fn phase_manifest(&self, joint: bool) -> Result<&Path> {
        let specific = if joint { &self.joint_manifest } else { &self.warmup_manifest };
        specific
            .as_deref()
            .or(self.manifest.as_deref())
            .ok_or_else(|| Error::Config("no manifest configured".into()))
    }
}
