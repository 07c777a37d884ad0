//! The run configuration file and model assembly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::BudgetConfig;
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig};
use crate::params::Params;
use crate::similarity::SimilarityConfig;
use crate::supernet::{Supernet, SupernetSpec};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA: &str = "dynroute-config/1";
pub const SEED_ENV: &str = "DYNROUTE_SEED";

fn schema() -> String {
    CONFIG_SCHEMA.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema")]
    pub schema: String,
    pub supernet: SupernetSpec,
    pub budget: BudgetConfig,
    pub similarity: SimilarityConfig,
    pub head: HeadConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: schema(),
            supernet: SupernetSpec::default(),
            budget: BudgetConfig::default(),
            similarity: SimilarityConfig::default(),
            head: HeadConfig::default(),
            data: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Replaces both the data and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Applies `DYNROUTE_SEED` when set.
    pub fn apply_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!("config schema {:?}, expected {CONFIG_SCHEMA:?}", self.schema)));
        }
        self.supernet.validate()?;
        self.budget.validate()?;
        self.similarity.validate()?;
        self.head.validate()?;
        self.data.validate(&self.budget.intervals)?;
        self.train.validate()?;
        if self.supernet.input_channels != self.data.channels {
            return Err(Error::Config(format!(
                "supernet takes {} input channels but data has {}",
                self.supernet.input_channels, self.data.channels
            )));
        }
        if self.head.num_classes < self.data.classes {
            return Err(Error::Config(format!(
                "head predicts {} classes but data has {}",
                self.head.num_classes, self.data.classes
            )));
        }
        self.supernet.check_input(self.data.image_size, self.data.image_size).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Supernet plus detection head.
pub struct Detector {
    pub supernet: Supernet,
    pub head: Head,
}

impl Detector {
    /// Fresh parameters drawn from `seed`.
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<(Detector, Params)> {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let supernet = Supernet::build(cfg.supernet.clone(), &mut params, &mut rng)?;
        let head = Head::build(cfg.head.clone(), cfg.supernet.head_channels, &mut params, &mut rng)?;
        Ok((Detector { supernet, head }, params))
    }

    /// Rebuilds the model recorded in a checkpoint.
    pub fn load(path: &Path) -> Result<(Detector, Params, RunConfig)> {
        let (saved, meta) = Params::load(path)?;
        let cfg = RunConfig::from_json(&meta).map_err(|e| Error::Config(format!("{}: checkpoint config: {e}", path.display())))?;
        let (detector, mut params) = Detector::build(&cfg, 0)?;
        params.assign_from(&saved)?;
        Ok((detector, params, cfg))
    }
}
