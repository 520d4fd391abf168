//! JSON run configuration. Every field is optional in the file; missing
//! ones take their defaults and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use omlc_core::codec::{CodecDims, NUM_BLOCKS};
use omlc_core::{MetaConfig, OmlConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "OMLC_SEED";
pub const DEFAULT_LAMBDAS: [f64; 4] = [0.0018, 0.0035, 0.0067, 0.013];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_channels: usize,
    pub latent_channels: usize,
    /// Number of modulated decoder blocks; fixed by the architecture.
    pub num_blocks: usize,
    pub modulator_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = CodecDims::default();
        Self {
            hidden_channels: d.hidden_channels,
            latent_channels: d.latent_channels,
            num_blocks: NUM_BLOCKS,
            modulator_hidden: d.modulator_hidden,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self) -> CliResult<CodecDims> {
        if self.num_blocks != NUM_BLOCKS {
            return Err(CliError::usage(format!("num_blocks must be {NUM_BLOCKS}")));
        }
        if self.hidden_channels == 0 || self.latent_channels == 0 || self.modulator_hidden == 0 {
            return Err(CliError::usage("channel counts must be positive"));
        }
        Ok(CodecDims {
            hidden_channels: self.hidden_channels,
            latent_channels: self.latent_channels,
            modulator_hidden: self.modulator_hidden,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub patch_size: usize,
    pub adapt_boundary: bool,
    pub jobs: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            patch_size: omlc_core::bitstream::DEFAULT_PATCH_SIZE,
            adapt_boundary: true,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub lambdas: Vec<f64>,
    pub oml: OmlConfig,
    pub encode: EncodeConfig,
    /// Overrides the `seed` of `train`, `meta` and `oml` when set.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            meta: MetaConfig::default(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            oml: OmlConfig::default(),
            encode: EncodeConfig::default(),
            seed: None,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Defaults, then the file if given, then `OMLC_SEED`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&fs::read_to_string(p).map_err(|e| CliError::io(p, e))?, p)?,
            None => Self::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            cfg.seed = Some(seed);
        }
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.meta.seed = s;
            self.oml.seed = s;
        }
    }
}
