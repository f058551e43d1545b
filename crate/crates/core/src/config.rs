//! Run configuration files and run manifests.
//!
//! Configurations are TOML documents:
//!
//! ```toml
//! schema_version = 1
//!
//! [data]
//! root = "data/libras"          # relative paths resolve against the config file
//! representation = "angle"      # raw | angle | raw_angle | raw_unnormalized
//! # split = "splits/libras.json"  (otherwise computed from train_fraction and split_seed)
//!
//! [eval]
//! n_way = 5
//! k_shot = 5
//!
//! [train]
//! max_epochs = 100
//!
//! [train.optimizer]
//! learning_rate = 1e-4
//! ```
//!
//! Every table and key is checked; unknown keys are errors. A manifest
//! written by the CLI embeds the resolved configuration and can be passed
//! back as `--config` to replay a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{stratified_split, DatasetCatalog, FeatureTable, Representation, SplitFile, SplitSide};
use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::pipeline::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

fn default_fraction() -> f64 {
    0.7
}

fn default_split_seed() -> u64 {
    42
}

fn default_representation() -> Representation {
    Representation::Angle
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with one sub-directory of `.npy` files per class.
    pub root: PathBuf,
    /// Dataset label used in tables and checkpoints; defaults to the root's
    /// directory name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Existing split file; when absent the split is computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_representation")]
    pub representation: Representation,
}

impl DataConfig {
    pub fn new(root: impl Into<PathBuf>, representation: Representation) -> Self {
        Self {
            root: root.into(),
            name: None,
            split: None,
            train_fraction: default_fraction(),
            split_seed: default_split_seed(),
            representation,
        }
    }

    pub fn dataset_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.root.display().to_string())
        })
    }

    fn resolve(&mut self, base: &Path) {
        if self.root.is_relative() {
            self.root = base.join(&self.root);
        }
        if let Some(split) = &self.split {
            if split.is_relative() {
                self.split = Some(base.join(split));
            }
        }
    }

    /// Catalog, named after [`Self::dataset_name`].
    pub fn load_catalog(&self) -> Result<DatasetCatalog> {
        let mut catalog = DatasetCatalog::load(&self.root)?;
        catalog.name = self.dataset_name();
        Ok(catalog)
    }

    pub fn load_split(&self, catalog: &DatasetCatalog) -> Result<SplitFile> {
        match &self.split {
            Some(path) => SplitFile::load(path, catalog),
            None => stratified_split(catalog, self.train_fraction, self.split_seed),
        }
    }

    /// Catalog, split and the feature table for `side`.
    pub fn load_table(&self, side: SplitSide) -> Result<FeatureTable> {
        let catalog = self.load_catalog()?;
        let split = self.load_split(&catalog)?;
        FeatureTable::from_split(&catalog, &split, side, self.representation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(data: DataConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data,
            eval: EvalSpec::default(),
            train: TrainConfig::default(),
        }
    }

    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` field of a JSON run manifest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent).map_err(|e| Error::io(parent, e))?;
        let base = base.as_path();
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text)?;
            let mut cfg: RunConfig = serde_json::from_value(manifest.config)
                .map_err(|e| Error::Config(format!("manifest config: {e}")))?;
            cfg.data.resolve(base);
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.train_fraction must be in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        self.eval.episode_spec()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Record of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Command-line arguments after the program name.
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration (a [`RunConfig`] for config-driven commands,
    /// otherwise the command's parameters).
    pub config: serde_json::Value,
    pub out_dir: PathBuf,
    pub started: String,
    pub finished: String,
    pub seed: u64,
    /// Files written by the run, relative to `out_dir`.
    pub outputs: Vec<String>,
    pub version: String,
}

impl RunManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}
