//! Run configuration (TOML with sections) and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::bridge::PoolingSpec;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, COLUMNS};
use crate::synth::SynthSpec;

/// Hex SHA-256 of the canonical JSON form (object keys sorted).
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let bytes = serde_json::to_vec(&v).map_err(|e| Error::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Text-conditioned fitting of the backbone before it is frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of training a sample with the text condition absent.
    pub text_drop_p: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            text_drop_p: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_steps: usize,
    pub cfg_scale: f64,
    pub onset_threshold: f64,
    pub seed: u64,
    pub metrics: Vec<String>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            n_steps: d.n_steps,
            cfg_scale: d.cfg_scale,
            onset_threshold: d.onset_threshold,
            seed: d.seed,
            metrics: COLUMNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `train.jsonl`, `eval.jsonl` and `clips/`.
    pub data_dir: PathBuf,
    /// Directory for the frozen backbone, checkpoints and logs.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for backbone and bridge initialization.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub pooling: PoolingSpec,
    pub synth: SynthSpec,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig {
                n_blocks: 4,
                d_model: 32,
                n_heads: 4,
                d_text: 16,
                s_a_max: 512,
                rope_base: 100.0,
                ffn_mult: 2,
                sigma_data: 0.3,
            },
            pooling: PoolingSpec::default(),
            synth: SynthSpec::default(),
            prior: PriorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            paths: Paths::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// The part of a run configuration that determines model compatibility.
#[derive(Serialize)]
struct CompatView<'a> {
    seed: u64,
    backbone: &'a BackboneConfig,
    pooling: &'a PoolingSpec,
    synth: &'a SynthSpec,
    prior: &'a PriorConfig,
    token_drop_p: f64,
    drop_text: bool,
    batch_size: usize,
    lr: f64,
    train_seed: u64,
}

#[derive(Serialize)]
struct BackboneView<'a> {
    seed: u64,
    backbone: &'a BackboneConfig,
    synth: &'a SynthSpec,
    prior: &'a PriorConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        // Keys missing from a section fall back to the run defaults, not to the
        // section type's own defaults.
        let parsed: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("default config serializes");
        merge(&mut merged, parsed);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths resolve against the config file's directory.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.paths.data_dir, &mut cfg.paths.run_dir] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pooling.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.synth.d_latent != self.backbone.d_model {
            return Err(Error::Config(format!(
                "synth.d_latent {} must equal backbone.d_model {}",
                self.synth.d_latent, self.backbone.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.prior.text_drop_p) || !(self.prior.lr > 0.0) || self.prior.batch_size == 0 {
            return Err(Error::Config("invalid prior settings".into()));
        }
        if self.eval.n_steps == 0 {
            return Err(Error::Config("eval.n_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of the whole configuration.
    pub fn config_hash(&self) -> Result<String> {
        canonical_hash(self)
    }

    /// Hash of the settings a checkpoint depends on; step counts, evaluation
    /// settings and paths are excluded so training can be extended on resume.
    pub fn compat_hash(&self) -> Result<String> {
        canonical_hash(&CompatView {
            seed: self.seed,
            backbone: &self.backbone,
            pooling: &self.pooling,
            synth: &self.synth,
            prior: &self.prior,
            token_drop_p: self.train.token_drop_p,
            drop_text: self.train.drop_text,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            train_seed: self.train.seed,
        })
    }

    /// Hash of the settings that determine the frozen backbone.
    pub fn backbone_hash(&self) -> Result<String> {
        canonical_hash(&BackboneView {
            seed: self.seed,
            backbone: &self.backbone,
            synth: &self.synth,
            prior: &self.prior,
        })
    }

    pub fn eval_config(&self, no_text: bool) -> EvalConfig {
        EvalConfig {
            n_steps: self.eval.n_steps,
            cfg_scale: self.eval.cfg_scale,
            no_text,
            use_video: true,
            ground_truth: false,
            seed: self.eval.seed,
            onset_threshold: self.eval.onset_threshold,
            pooling: self.pooling.clone(),
            metrics: self.eval.metrics.clone(),
        }
    }
}
