//! The run configuration: one versioned JSON document covering data, model
//! shape, teacher training, distillation, scoring and the pilot study.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{DistillConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scoring::Grouping;
use crate::tasks::{MetricKind, SyntheticSpec, TsvSchema};
use crate::units::{MaskKind, UnitKind};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Tsv(TsvData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsvData {
    pub name: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub schema: TsvSchema,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    /// Vocabulary cap, reserved tokens excluded.
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_metric() -> MetricKind {
    MetricKind::Accuracy
}

fn default_max_vocab() -> usize {
    5000
}

fn default_max_len() -> usize {
    64
}

/// Architecture knobs. Vocabulary size, sequence length and class count come
/// from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub layers: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            hidden: m.hidden,
            heads: m.heads,
            head_dim: m.head_dim,
            ffn: m.ffn,
            layers: m.layers,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab_size: usize, max_len: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len,
            hidden: self.hidden,
            heads: self.heads,
            head_dim: self.head_dim,
            ffn: self.ffn,
            layers: self.layers,
            classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub grouping: Grouping,
    /// Examples per `|gradient|` term. At 1 the score is the per-example
    /// expectation; larger batches let opposite-signed gradients cancel
    /// before the absolute value is taken.
    pub batch_size: usize,
    /// Split whose examples feed score accumulation.
    pub split: Split,
    /// Leading examples of the split to use; `None` takes all of them.
    pub max_examples: Option<usize>,
    pub bins: usize,
    /// Unit kind whose `I` density drives the automatic sparsity estimate.
    pub auto_kind: UnitKind,
    pub granularity: MaskKind,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            grouping: Grouping::default(),
            batch_size: 1,
            split: Split::Train,
            max_examples: None,
            bins: crate::sparsify::DEFAULT_BINS,
            auto_kind: UnitKind::Neuron,
            granularity: MaskKind::Structured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotConfig {
    pub sparsities: Vec<f64>,
    pub trials: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            sparsities: vec![0.0, 0.05, 0.10, 0.15],
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelShape,
    pub teacher: TrainConfig,
    pub distill: DistillConfig,
    pub scoring: ScoringConfig,
    pub pilot: PilotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelShape::default(),
            teacher: TrainConfig::default(),
            distill: DistillConfig::default(),
            scoring: ScoringConfig::default(),
            pilot: PilotConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("unparseable config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match &self.data {
            DataConfig::Synthetic(spec) => spec.validate()?,
            DataConfig::Tsv(t) => {
                if t.max_len < 2 {
                    return Err(Error::Config("max_len must be at least 2".into()));
                }
                if t.max_vocab == 0 {
                    return Err(Error::Config("max_vocab must be positive".into()));
                }
            }
        }
        let m = &self.model;
        if m.hidden == 0 || m.head_dim == 0 || m.layers == 0 {
            return Err(Error::Config("hidden size, head size and layer count must be positive".into()));
        }
        self.teacher.validate()?;
        self.distill.validate()?;
        self.distill.student_init.validate(m.layers)?;
        let s = &self.scoring;
        if s.batch_size == 0 {
            return Err(Error::Config("scoring batch size must be positive".into()));
        }
        if s.max_examples == Some(0) {
            return Err(Error::Config("max_examples must be positive".into()));
        }
        if s.bins < 2 {
            return Err(Error::Config("at least two density bins are needed".into()));
        }
        if s.auto_kind == UnitKind::Parameter && s.granularity == MaskKind::Structured {
            return Err(Error::Config("structured runs estimate sparsity from heads or neurons".into()));
        }
        if self.pilot.trials == 0 {
            return Err(Error::Config("pilot needs at least one trial".into()));
        }
        if self.pilot.sparsities.iter().any(|&s| !(0.0..1.0).contains(&s)) {
            return Err(Error::Config("pilot sparsities must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 over everything that shapes a student's training: seed, data,
    /// model shape and the distillation settings. Scoring and pilot settings
    /// are excluded so that a checkpoint stays valid when only they change.
    pub fn distill_digest(&self) -> Result<String> {
        let subset = serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "model": self.model,
            "teacher": self.teacher,
            "distill": {
                "tau": self.distill.tau,
                "alpha": self.distill.alpha,
                "student_init": self.distill.student_init,
                "train": self.distill.train,
            },
        });
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&subset)?)))
    }

    /// Digest of the whole document.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
