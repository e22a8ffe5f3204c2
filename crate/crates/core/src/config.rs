//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SyntheticConfig, BATCH_IDENTITIES, PAIRS_PER_IDENTITY};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossTerm, LossWeights, ABLATABLE};
use crate::trainer::StageConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization and batch sampling.
    pub seed: u64,
    /// Seeds gallery draws and the swap check during evaluation.
    pub eval_seed: u64,
    pub out: PathBuf,
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub training: StageConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            eval_seed: 0,
            out: PathBuf::from("runs/default"),
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            training: StageConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.training.validate()?;
        self.loss.validate()?;
        let n_train = self.data.n_identities / 2;
        if n_train < BATCH_IDENTITIES || self.data.samples_per_identity_per_modality < PAIRS_PER_IDENTITY {
            return Err(Error::Config(format!(
                "a batch needs {BATCH_IDENTITIES} training identities with {PAIRS_PER_IDENTITY} samples per modality each"
            )));
        }
        self.model.dims(self.data.raw_dim, self.data.n_identities / 2).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Parses `gmm,lmc,...` into loss terms.
pub fn parse_ablations(list: &str) -> Result<Vec<LossTerm>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            ABLATABLE
                .iter()
                .copied()
                .find(|t| t.name() == name)
                .ok_or_else(|| Error::Config(format!("cannot ablate '{name}'; choose from gmm, lmc, rec, idc, cyc, ambi")))
        })
        .collect()
}

/// Parses `a,b,c` epoch counts.
pub fn parse_stage_epochs(list: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = list.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected three epoch counts, got '{list}'")));
    }
    let mut out = [0; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p
            .parse()
            .map_err(|_| Error::Config(format!("'{p}' is not an epoch count")))?;
    }
    Ok(out)
}
