//! Experiment manifests (TOML).
//!
//! ```toml
//! output_dir = "runs/default"
//! trials = 5            # seeds default to world.seed, world.seed + 1, ...
//! # data_dir = "data"   # use gen-data output instead of a generated world
//!
//! [world]
//! shots = 1
//!
//! [train]
//! k = 10
//! mu = 0.999
//!
//! [train.loss_weights]
//! lambda1 = 0.01
//! ```
//!
//! Every field is optional. With a generated world each trial seed reseeds
//! both the world and training; with `data_dir` only training is reseeded.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use protoreg::data::WorldParams;
use protoreg::engine::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    pub output_dir: PathBuf,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub data_dir: Option<PathBuf>,
    pub world: WorldParams,
    pub train: TrainConfig,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            trials: 1,
            seeds: Vec::new(),
            data_dir: None,
            world: WorldParams::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| CliError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CliError::Config("trials must be positive".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.trials {
            return Err(CliError::Config(format!(
                "{} seeds given for {} trials",
                self.seeds.len(),
                self.trials
            )));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(CliError::Config("trial seeds must be unique".into()));
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "data_dir {} does not exist",
                    dir.display()
                )));
            }
        }
        self.train.validate()?;
        self.world.build()?;
        Ok(())
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.trials as u64)
                .map(|i| self.world.seed + i)
                .collect()
        } else {
            self.seeds.clone()
        }
    }

    /// Sets a field by dotted path. Bare names are looked up in `train`,
    /// `train.loss_weights`, `world` and the top level, in that order.
    /// The value is parsed as JSON, falling back to a string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("manifest serializes to JSON");
        let path = resolve(&tree, key)
            .ok_or_else(|| CliError::Config(format!("unknown manifest field `{key}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut tree;
        for part in &path {
            node = node.get_mut(part.as_str()).expect("resolved path exists");
        }
        *node = value;
        let updated: Self = serde_json::from_value(tree)
            .map_err(|e| CliError::Config(format!("`{key}` = {raw}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

fn resolve(tree: &Value, key: &str) -> Option<Vec<String>> {
    let exists = |path: &[String]| {
        let mut node = tree;
        for p in path {
            match node.get(p.as_str()) {
                Some(n) => node = n,
                None => return false,
            }
        }
        true
    };
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    if parts.len() > 1 {
        return exists(&parts).then_some(parts);
    }
    [
        vec!["train", key],
        vec!["train", "loss_weights", key],
        vec!["world", key],
        vec![key],
    ]
    .into_iter()
    .map(|p| p.into_iter().map(str::to_string).collect::<Vec<_>>())
    .find(|p| exists(p))
}
