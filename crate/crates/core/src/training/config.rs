//! Experiment configuration: TOML sections per module, named presets, and
//! `key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::composer::CombinerConfig;
use crate::data::TokenScheme;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::objective::{LossConfig, NegativeMode};

use super::optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Optimizer settings for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate of the text projection layer (stage 1 only).
    pub projection_lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Base batch size; halved when training bi-directionally.
    pub batch_size: usize,
    pub bidirectional: bool,
    pub token_scheme: TokenScheme,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub combiner: CombinerConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub adamw: AdamW,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

/// Resolved settings of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    /// Effective batch size after the bi-directional halving.
    pub batch_size: usize,
    pub lr: f64,
    pub projection_lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub temperature: f64,
    pub alpha: f64,
    pub bidirectional: bool,
    pub reversed_negatives: NegativeMode,
    pub token_scheme: TokenScheme,
    pub seed: u64,
}

pub const PRESETS: [&str; 3] = ["desk", "paper-cirr", "paper-fiq"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset")
    }
}

impl ExperimentConfig {
    /// `desk` is sized for the synthetic corpus on a CPU; the `paper-*`
    /// presets carry the published optimizer settings.
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            combiner: CombinerConfig::default(),
            loss: LossConfig {
                temperature: 100.0,
                alpha: 0.5,
                reversed_negatives: NegativeMode::TargetSide,
            },
            train: TrainSection {
                batch_size: 32,
                bidirectional: true,
                token_scheme: TokenScheme::Both,
                schedule: Schedule::Cosine,
            },
            adamw: AdamW::default(),
            stage1: StageConfig {
                epochs: 30,
                lr: 1e-3,
                projection_lr: 1e-2,
                weight_decay: 0.01,
            },
            stage2: StageConfig {
                epochs: 60,
                lr: 1e-3,
                projection_lr: 1e-3,
                weight_decay: 0.01,
            },
        };
        let paper = |alpha: f64| Self {
            loss: LossConfig { alpha, ..desk.loss },
            stage1: StageConfig {
                epochs: 15,
                lr: 5e-5,
                projection_lr: 5e-3,
                weight_decay: 0.05,
            },
            stage2: StageConfig {
                epochs: 200,
                lr: 5e-5,
                projection_lr: 5e-5,
                weight_decay: 0.05,
            },
            ..desk.clone()
        };
        match name {
            "desk" => Ok(desk),
            "paper-cirr" => Ok(paper(0.1)),
            "paper-fiq" => Ok(paper(0.5)),
            other => Err(Error::Usage(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Preset, then the TOML document (if any), then `key=value` overrides
    /// with dotted keys such as `stage1.lr=0.001`. Unknown keys anywhere are
    /// an error.
    pub fn resolve(preset: &str, toml_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base = Self::preset(preset)?;
        let mut tree = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = toml_text {
            let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut tree, toml::Value::Table(doc), "")?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.train.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if self.combiner.hidden == 0 {
            return Err(Error::Config("combiner.hidden must be positive".into()));
        }
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let ok = [s.lr, s.projection_lr, s.weight_decay].iter().all(|x| x.is_finite() && *x >= 0.0);
            if !ok {
                return Err(Error::Config(format!("{name}: rates must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the canonical TOML rendering.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_toml().as_bytes())
    }

    pub fn effective_batch_size(&self) -> usize {
        if self.train.bidirectional {
            (self.train.batch_size / 2).max(2)
        } else {
            self.train.batch_size
        }
    }

    pub fn stage(&self, stage: u8) -> TrainConfig {
        let s = if stage == 1 { self.stage1 } else { self.stage2 };
        TrainConfig {
            stage,
            epochs: s.epochs,
            batch_size: self.effective_batch_size(),
            lr: s.lr,
            projection_lr: s.projection_lr,
            weight_decay: s.weight_decay,
            schedule: self.train.schedule,
            temperature: self.loss.temperature,
            alpha: self.loss.alpha,
            bidirectional: self.train.bidirectional,
            reversed_negatives: self.loss.reversed_negatives,
            token_scheme: self.train.token_scheme,
            seed: self.seed,
        }
    }
}

fn merge(into: &mut toml::Value, from: toml::Value, path: &str) -> Result<()> {
    match (into, from) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown key {key}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        let slot = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        if i + 1 == parts.len() {
            let mut v = parse_value(raw.trim());
            // integers given where floats are expected
            if let (toml::Value::Float(_), toml::Value::Integer(n)) = (&*slot, &v) {
                v = toml::Value::Float(*n as f64);
            }
            *slot = v;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}
