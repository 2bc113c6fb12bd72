//! Run configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary::ScpConfig;
use crate::container::read_file;
use crate::episodes::GenSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::localizer::LocalizerConfig;
use crate::scr::ScrConfig;
use crate::supervision::{LabelConfig, LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Temporal receptive field of each head, odd.
    pub window: usize,
    pub init_seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            window: 9,
            init_seed: 23,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub enabled: bool,
    pub offset: usize,
    pub top_m: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        let scp = ScpConfig::default();
        Self {
            enabled: true,
            offset: scp.offset,
            top_m: scp.top_m,
        }
    }
}

impl RefineConfig {
    pub fn scp(&self) -> ScpConfig {
        ScpConfig {
            offset: self.offset,
            top_m: self.top_m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    /// Leading dataset episodes used for training; the rest are held out.
    pub episodes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            episodes: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub t_max: usize,
    pub data: GenSpec,
    pub scr: ScrConfig,
    pub heads: HeadConfig,
    pub labels: LabelConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub scp: RefineConfig,
    pub localizer: LocalizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            t_max: 128,
            data: GenSpec::default(),
            scr: ScrConfig::default(),
            heads: HeadConfig::default(),
            labels: LabelConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            scp: RefineConfig::default(),
            localizer: LocalizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.scr.validate()?;
        self.labels.validate()?;
        self.loss.weights.validate()?;
        self.eval.validate()?;
        if self.scr.n_patches != self.data.video.n || self.scr.channels != self.data.video.d {
            return Err(Error::Config(format!(
                "model expects [n={}, d={}] but data is [n={}, d={}]",
                self.scr.n_patches, self.scr.channels, self.data.video.n, self.data.video.d
            )));
        }
        if self.data.video.t_query > self.t_max {
            return Err(Error::Config(format!(
                "query length {} exceeds t_max {}",
                self.data.video.t_query, self.t_max
            )));
        }
        if self.heads.window % 2 == 0 {
            return Err(Error::Config(format!("heads.window must be odd, got {}", self.heads.window)));
        }
        if self.localizer.top_k == 0 || self.localizer.cluster.eps <= 0.0 || self.localizer.cluster.min_samples == 0 {
            return Err(Error::Config("localizer needs top_k >= 1, eps > 0, min_samples >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            loss: self.loss,
            epsilon: self.labels.epsilon,
        }
    }

    /// Sets the channel width of both the data and the model.
    pub fn with_channels(mut self, d: usize) -> Self {
        self.data.video.d = d;
        self.scr.channels = d;
        self
    }
}
