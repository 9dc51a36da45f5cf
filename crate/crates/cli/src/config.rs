//! Training run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vitzsl::train::TrainConfig;
use vitzsl::{Error, ModelConfig, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Architecture choices; geometry and attribute count come from the dataset.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_width: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Bundle root, relative to the config file.
    pub dataset: PathBuf,
    /// Output directory, relative to the config file.
    pub output: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses and checks the schema version. Relative paths are resolved
    /// against the directory holding `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output = base.join(&cfg.output);
        Ok(cfg)
    }

    pub fn model_config(&self, geometry: [usize; 3], num_attributes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_height: geometry[0],
            image_width: geometry[1],
            channels: geometry[2],
            patch_size: m.patch_size,
            dim: m.dim,
            depth: m.depth,
            heads: m.heads,
            mlp_width: m.mlp_width,
            num_attributes,
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
