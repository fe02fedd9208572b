use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use freqmamba::model::ModelConfig;
use freqmamba::training::{Background, RainSynthParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::fail::{config_error, Exit};

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of synthetic pairs (ignored with `paired_folder`).
    pub pairs: usize,
    /// Folder with `rainy/` and `clean/` PPM images of matching names.
    pub paired_folder: Option<PathBuf>,
    pub synth: RainSynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pairs: 16,
            paired_folder: None,
            synth: RainSynthParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| e.context(Exit::Io))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_error(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks values and input paths before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| config_error(e.to_string()))?;
        self.train.validate().map_err(|e| config_error(e.to_string()))?;
        self.data.synth.validate().map_err(|e| config_error(e.to_string()))?;
        if let Background::Folder(dir) = &self.data.synth.background {
            if !dir.is_dir() {
                bail!(config_error(format!("background folder {} does not exist", dir.display())));
            }
        }
        match &self.data.paired_folder {
            Some(dir) => {
                for sub in ["rainy", "clean"] {
                    if !dir.join(sub).is_dir() {
                        bail!(config_error(format!("{} has no {sub}/ folder", dir.display())));
                    }
                }
            }
            None if self.data.pairs == 0 => bail!(config_error("data.pairs must be positive")),
            None => {
                let patch = self.train.stages.iter().map(|s| s.patch).max().unwrap_or(0);
                let (h, w) = (self.data.synth.height, self.data.synth.width);
                if h < patch || w < patch {
                    bail!(config_error(format!(
                        "synthetic images are {h}x{w}, smaller than the {patch}px training patch"
                    )));
                }
            }
        }
        Ok(())
    }
}
