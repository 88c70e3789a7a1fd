//! TOML configuration with one table per pipeline stage.
//!
//! Every key is optional and defaults to the library default. Unknown keys
//! are rejected so that typos do not silently fall back to defaults.
//!
//! ```toml
//! [patch]
//! m = 0.05
//! grid_step = 8
//!
//! [vote]
//! k = 3
//! tau = 10.0
//!
//! [detect]
//! protocol = "modes"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::AnnParams;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::nn::TrainConfig;
use crate::patch::PatchConfig;
use crate::pipeline::{DetectConfig, PipelineConfig};
use crate::scene::SceneConfig;
use crate::verify::VerifyParams;
use crate::vote::VoteParams;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub patch: PatchConfig,
    pub vote: VoteParams,
    pub verify: VerifyParams,
    pub detect: DetectConfig,
    pub metric: MetricConfig,
    pub ann: AnnParams,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every section; parameter errors are reported as config errors.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            self.pipeline().validate(),
            self.metric.validate(),
            self.train.validate(),
            self.scene.validate(),
            self.ann.validate(),
        ];
        for c in checks {
            c.map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            patch: self.patch,
            vote: self.vote.clone(),
            verify: self.verify.clone(),
            detect: self.detect.clone(),
        }
    }
}
