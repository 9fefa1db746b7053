use std::fmt;
use std::path::Path;
use std::str::FromStr;

use jsonschema::JSONSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{ensure, MvpError, Result};
use crate::moe::MoeConfig;
use crate::objectives::LossConfig;
use crate::pruning::{FinetuneConfig, PruneConfig};
use crate::relevance::StatsOptions;
use crate::synth::{BackboneDims, PretrainConfig, StreamConfig};

/// The published config schema.
pub const CONFIG_SCHEMA: &str = include_str!("../../../../schema/config.schema.json");

pub const SEED_OVERRIDE_ENV: &str = "MVP_SEED_OVERRIDE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mvp,
    SharedProjector,
    ZeroShot,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mvp => "mvp",
            Strategy::SharedProjector => "shared_projector",
            Strategy::ZeroShot => "zero_shot",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = MvpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvp" => Ok(Strategy::Mvp),
            "shared_projector" => Ok(Strategy::SharedProjector),
            "zero_shot" => Ok(Strategy::ZeroShot),
            other => Err(MvpError::Configuration(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Token width, decoder width and answer vocabulary; feature widths come
/// from the stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_tok: usize,
    pub hidden: usize,
    pub n_vocab: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_tok: 32,
            hidden: 64,
            n_vocab: 16,
        }
    }
}

/// Continual training of each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_router: f64,
    pub lr_experts: f64,
    /// Learning rate of the single trainable projector baseline.
    pub lr_shared: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_router: 0.003,
            lr_experts: 0.003,
            lr_shared: 0.01,
            train_samples: 512,
            eval_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: Strategy,
    pub stream: StreamConfig,
    pub model: ModelDims,
    pub moe: MoeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub finetune: FinetuneConfig,
    pub pretrain: PretrainConfig,
    pub stats: StatsOptions,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            strategy: Strategy::Mvp,
            stream: StreamConfig {
                label_share: 0.5,
                ..StreamConfig::default()
            },
            model: ModelDims::default(),
            moe: MoeConfig {
                k: 1,
                ..MoeConfig::default()
            },
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            finetune: FinetuneConfig::default(),
            pretrain: PretrainConfig::default(),
            stats: StatsOptions::default(),
            output_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn backbone_dims(&self) -> BackboneDims {
        BackboneDims {
            d_img: self.stream.d_img,
            d_text: self.stream.d_text,
            d_tok: self.model.d_tok,
            hidden: self.model.hidden,
            n_vocab: self.model.n_vocab,
        }
    }

    /// Checks the cross-field constraints the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        self.loss.validate()?;
        ensure!(
            self.stream.d_text == self.model.d_tok,
            Validation,
            "the router reads instructions as tokens: d_text = {} must equal d_tok = {}",
            self.stream.d_text,
            self.model.d_tok
        );
        ensure!(
            self.stream.n_classes <= self.model.n_vocab,
            Validation,
            "{} answer classes exceed a vocabulary of {}",
            self.stream.n_classes,
            self.model.n_vocab
        );
        ensure!(
            self.train.train_samples > self.stream.d_img.max(self.stream.d_text),
            Validation,
            "{} training samples cannot estimate a {}-dimensional covariance",
            self.train.train_samples,
            self.stream.d_img.max(self.stream.d_text)
        );
        ensure!(
            self.train.batch_size >= 1 && self.train.eval_samples >= 1,
            Validation,
            "batch size and evaluation samples must be positive"
        );
        ensure!(
            self.train.lr_router > 0.0 && self.train.lr_experts > 0.0 && self.train.lr_shared > 0.0,
            Validation,
            "learning rates must be positive"
        );
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Copy with `N_E` replaced and `K` clamped to it.
    pub fn with_experts(&self, n_experts: usize) -> RunConfig {
        let mut c = self.clone();
        c.moe.n_experts = n_experts;
        c.moe.k = c.moe.k.min(n_experts);
        c
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Validates `value` against the shipped schema, reporting every violation
/// with its instance and schema paths.
pub fn validate_against_schema(value: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(CONFIG_SCHEMA)?;
    let compiled = JSONSchema::compile(&schema)
        .map_err(|e| MvpError::Configuration(format!("config schema does not compile: {e}")))?;
    if let Err(errors) = compiled.validate(value) {
        let lines: Vec<String> = errors
            .map(|e| format!("at '{}' (schema '{}'): {}", e.instance_path, e.schema_path, e))
            .collect();
        return Err(MvpError::Validation(lines.join("; ")));
    }
    Ok(())
}

/// Schema check, typed parse, then semantic checks.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| MvpError::Validation(format!("config is not valid JSON: {e}")))?;
    validate_against_schema(&value)?;
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| MvpError::Validation(format!("config does not match the schema types: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Applies `MVP_SEED_OVERRIDE` when it is set.
pub fn apply_seed_override(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(raw) = std::env::var(SEED_OVERRIDE_ENV) {
        cfg.seed = raw.trim().parse().map_err(|_| {
            MvpError::Validation(format!("{SEED_OVERRIDE_ENV}={raw:?} is not an unsigned integer"))
        })?;
    }
    Ok(())
}
