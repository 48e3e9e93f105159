//! The run configuration: one JSON document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::{DecodeConfig, DetectorConfig};
use crate::error::{Error, Result};
use crate::scene::{self, GenConfig, Scene};
use crate::trainer::TrainConfig;

/// Environment variable naming the root that relative `out_dir` values
/// resolve against.
pub const OUT_ROOT_ENV: &str = "LGD_OUT_ROOT";
pub const RESOLVED_CONFIG_FILE: &str = "config_resolved.json";

/// Where scenes come from. A path takes precedence over generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_seed: u64,
    pub train_count: usize,
    pub train_path: Option<PathBuf>,
    pub val_seed: u64,
    pub val_count: usize,
    pub val_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_seed: 1,
            train_count: 500,
            train_path: None,
            val_seed: 2,
            val_count: 100,
            val_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub data: DataConfig,
    pub model: DetectorConfig,
    pub trainer: TrainConfig,
    pub decode: DecodeConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            data: DataConfig::default(),
            model: DetectorConfig::default(),
            trainer: TrainConfig::default(),
            decode: DecodeConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("run_config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::invalid("run_config", format!("{}: {e}", path.display())))
    }

    /// Applies `(path, value)` overrides such as `("trainer.total_iters",
    /// "2000")`. Values parse as JSON, falling back to a plain string. The
    /// path must name an existing field.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for (path, raw) in overrides {
            let slot = field_mut(&mut doc, path)
                .ok_or_else(|| Error::invalid("run_config", format!("unknown field `{path}`")))?;
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::invalid("run_config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.trainer.validate()?;
        if self.model.num_classes != self.gen.num_classes {
            return Err(Error::invalid(
                "run_config",
                format!(
                    "model.num_classes {} differs from gen.num_classes {}",
                    self.model.num_classes, self.gen.num_classes
                ),
            ));
        }
        Ok(())
    }

    /// `out_dir`, placed under `$LGD_OUT_ROOT` when relative and the
    /// variable is set.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out_dir.is_relative() => PathBuf::from(root).join(&self.out_dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully defaulted configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_pretty_json() + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn train_scenes(&self) -> Result<Vec<Scene>> {
        load_or_generate(self.data.train_path.as_deref(), self.data.train_seed, self.data.train_count, &self.gen)
    }

    pub fn val_scenes(&self) -> Result<Vec<Scene>> {
        load_or_generate(self.data.val_path.as_deref(), self.data.val_seed, self.data.val_count, &self.gen)
    }
}

fn field_mut<'a>(doc: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(doc, |node, key| node.as_object_mut()?.get_mut(key))
}

pub fn load_or_generate(path: Option<&Path>, seed: u64, count: usize, gen: &GenConfig) -> Result<Vec<Scene>> {
    match path {
        Some(p) => Ok(scene::load_annotations(p)?.iter().map(|r| r.scene()).collect()),
        None => Ok(scene::generate_dataset(seed, count, gen)),
    }
}
