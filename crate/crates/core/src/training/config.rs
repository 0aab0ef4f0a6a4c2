use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::OptimizerConfig;

/// Environment variable consulted when a config has no `seed`.
pub const SEED_ENV: &str = "CCSP_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Detector trained on degraded images.
    Direct,
    /// Denoiser pretrained on pairs, detector trained on clean images,
    /// chained at inference.
    EndToEnd,
    /// Both networks trained together on `α·L1 + β·L2`.
    Joint,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Direct, Strategy::EndToEnd, Strategy::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::EndToEnd => "end_to_end",
            Strategy::Joint => "joint",
        }
    }

    pub fn uses_denoiser(self) -> bool {
        self != Strategy::Direct
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Image directories; labels sit next to images as `<stem>.txt`.
/// When both are given they are paired by relative path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    #[serde(default)]
    pub degraded: Option<PathBuf>,
    #[serde(default)]
    pub clean: Option<PathBuf>,
}

fn default_epochs() -> usize {
    100
}
fn default_denoiser_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    8
}
fn default_grad_clip() -> Option<f64> {
    Some(5.0)
}
fn default_true() -> bool {
    true
}
fn default_class_names() -> Vec<String> {
    ["triangle", "circle", "octagon"].map(String::from).to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Optimizer of the denoiser; `optimizer` when absent.
    #[serde(default)]
    pub denoiser_optimizer: Option<OptimizerConfig>,
    /// Cap on the global gradient norm of each step; `null` disables it.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Detector (or joint) epochs.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Denoiser pretraining epochs: end-to-end phase one, or joint warm start.
    #[serde(default = "default_denoiser_epochs")]
    pub denoiser_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Random horizontal flips during training.
    #[serde(default = "default_true")]
    pub hflip: bool,
    /// Joint only: pretrain the denoiser on pairs before joint training.
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_class_names")]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub data: DataPaths,
}

impl ExperimentConfig {
    pub fn new(strategy: Strategy) -> Self {
        ExperimentConfig {
            strategy,
            precision: Precision::default(),
            detector: DetectorConfig::default(),
            denoiser: DenoiserConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            denoiser_optimizer: None,
            grad_clip: default_grad_clip(),
            epochs: default_epochs(),
            denoiser_epochs: default_denoiser_epochs(),
            batch_size: default_batch_size(),
            seed: None,
            hflip: true,
            warm_start: false,
            class_names: default_class_names(),
            data: DataPaths::default(),
        }
    }

    /// Parses JSON, rejecting unknown keys (all of them are named in the error).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::config(format!("malformed config: {e}")))?;
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// SHA-256 of the compact JSON form.
    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.detector.neck_widths {
            self.detector.cot.validate(w)?;
        }
        self.detector.anchors.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(o) = &self.denoiser_optimizer {
            o.validate()?;
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.detector.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.denoiser.channels != self.detector.backbone.in_channels {
            return Err(Error::config("denoiser and detector channel counts differ"));
        }
        Ok(())
    }

    /// Data directories this strategy needs, or a config error naming the gap.
    pub fn check_data_paths(&self) -> Result<()> {
        let (d, c) = (self.data.degraded.is_some(), self.data.clean.is_some());
        let ok = match self.strategy {
            Strategy::Direct => d,
            Strategy::EndToEnd | Strategy::Joint => d && c,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "strategy {} needs data.degraded{}",
                self.strategy,
                if self.strategy.uses_denoiser() { " and data.clean" } else { "" }
            )))
        }
    }

    /// `seed`, else `CCSP_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn denoiser_optimizer(&self) -> OptimizerConfig {
        self.denoiser_optimizer.unwrap_or(self.optimizer)
    }

    pub fn class_name(&self, class_id: usize) -> String {
        self.class_names.get(class_id).cloned().unwrap_or_else(|| format!("c{class_id}"))
    }
}
