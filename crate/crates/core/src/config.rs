//! Run configuration. The on-disk form is TOML with dotted sections
//! (`model.*`, `optim.*`, `loss.*`, `audio.*`, `data.*`); every key has a
//! default, and `key=value` overrides are applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::objective::CostConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryInit {
    /// Query content projected from the clip's audio embedding.
    Audio,
    /// Ablation: a learned constant independent of the audio.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub c_av: usize,
    pub d_model: usize,
    pub n_queries: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub c_m: usize,
    pub ffn_mult: usize,
    pub visual_channels: [usize; 4],
    pub audio_dim: usize,
    pub query_init: QueryInit,
    pub temporal_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_av: 256,
            d_model: 256,
            n_queries: 16,
            heads: 8,
            enc_layers: 3,
            dec_layers: 3,
            c_m: 64,
            ffn_mult: 4,
            visual_channels: [32, 64, 128, 256],
            audio_dim: 128,
            query_init: QueryInit::Audio,
            temporal_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Widths sized for single-core runs on 64×64 canvases.
    pub fn desk() -> Self {
        Self {
            c_av: 64,
            d_model: 64,
            n_queries: 4,
            heads: 4,
            enc_layers: 1,
            dec_layers: 2,
            c_m: 32,
            ffn_mult: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::Config("model.n_queries must be >= 1".into()));
        }
        for (name, w) in [("c_av", self.c_av), ("d_model", self.d_model)] {
            if self.heads == 0 || w % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model.{name} = {w} must be divisible by model.heads = {}",
                    self.heads
                )));
            }
        }
        if self.c_m == 0 || self.audio_dim == 0 || self.visual_channels.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// When non-zero, overrides `epochs`.
    pub max_steps: usize,
    pub batch_size: usize,
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 50,
            max_steps: 0,
            batch_size: 8,
            log_every: 50,
        }
    }
}

impl OptimConfig {
    pub fn total_steps(&self, n_samples: usize) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            self.epochs * n_samples.div_ceil(self.batch_size.max(1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square working resolution; images and masks are resampled to it.
    pub canvas: usize,
    pub threshold: f64,
    pub beta2: f64,
    /// Steps used for each arm of the finetuning sweep.
    pub finetune_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            threshold: 0.5,
            beta2: 1.0,
            finetune_steps: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: CostConfig,
    pub audio: SpectrogramConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            loss: CostConfig::default(),
            audio: SpectrogramConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimConfig {
                lr: 1e-3,
                batch_size: 4,
                max_steps: 500,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parse `text`, then apply `key=value` overrides (dotted keys; values
    /// parsed as TOML scalars, falling back to bare strings).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_scalar(value.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.data.canvas == 0 || self.data.canvas % 32 != 0 {
            return Err(Error::Config(format!(
                "data.canvas = {} must be a positive multiple of 32",
                self.data.canvas
            )));
        }
        if !(self.data.threshold > 0.0 && self.data.threshold < 1.0) {
            return Err(Error::Config("data.threshold must lie in (0, 1)".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_scalar(s: &str) -> toml::Value {
    let probe = format!("v = {s}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(s.to_string())),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::Config(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
