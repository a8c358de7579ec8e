//! Run configuration: one JSON document with sections `model`, `sgd`,
//! `augment`, `data` and `run`. Every field has a default, unknown keys are
//! rejected, and errors name the failing JSON path (`sgd.schedule[1].lr`).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::io::canonical_json;
use crate::network::ModelConfig;
use crate::train::{AugmentConfig, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_tile() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; the `--data` flag takes precedence.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Side of the square tiles used for prediction and benchmarking.
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            tile: default_tile(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads. `--threads` and `ROTEQ_THREADS` take precedence;
    /// with none of them set all cores are used.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
}

fn default_sgd() -> SgdConfig {
    SgdConfig::desk(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_sgd")]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            sgd: default_sgd(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            run: RunSection::default(),
        }
        .resolved()
        .expect("defaults are consistent")
    }
}

impl RunConfig {
    /// Parses and resolves a document. Syntax and type errors carry the JSON
    /// path at which they occurred.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.resolved()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills derived defaults and checks cross-section consistency.
    pub fn resolved(mut self) -> Result<Self> {
        self.model = self.model.resolved()?;
        self.sgd.validate()?;
        self.augment.validate()?;
        self.data.synthetic.validate()?;
        let k = self.model.spatial_multiple();
        if self.data.tile == 0 || !self.data.tile.is_multiple_of(k) {
            return Err(Error::config(
                "data.tile",
                format!("{} is not a positive multiple of {k}", self.data.tile),
            ));
        }
        if self.model.classes != self.data.synthetic.classes() {
            return Err(Error::config(
                "model.classes",
                format!(
                    "{} but the dataset has {} classes",
                    self.model.classes,
                    self.data.synthetic.classes()
                ),
            ));
        }
        if self.model.in_channels != self.data.synthetic.in_channels() {
            return Err(Error::config(
                "model.in_channels",
                format!(
                    "{} but the dataset has {} bands",
                    self.model.in_channels,
                    self.data.synthetic.in_channels()
                ),
            ));
        }
        if self.run.threads == Some(0) {
            return Err(Error::config("run.threads", "must be at least 1"));
        }
        Ok(self)
    }

    /// The resolved document with every default written out.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }
}
