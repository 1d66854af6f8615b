//! Run configuration: one JSON document, overridable field by field.

use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversarial::PerturbationConfig;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::AdamConfig;
use crate::variations::VariationSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub collection: Option<PathBuf>,
    /// Training queries.
    pub queries: Option<PathBuf>,
    pub dev_queries: Option<PathBuf>,
    pub test_queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub negatives: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    /// Starting checkpoint for AT resume and finetuning.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Evaluate on the dev queries after every epoch and keep the best.
    pub select_on_dev: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            negatives: 1,
            learning_rate: 3e-3,
            seed: 0,
            adam: AdamConfig::default(),
            select_on_dev: true,
        }
    }
}

/// Adversarial-training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtConfig {
    /// Load `paths.checkpoint` and train `at_epochs` epochs with the
    /// perturbation strategy switched on.
    pub at_from_checkpoint: bool,
    pub at_epochs: usize,
}

impl Default for AtConfig {
    fn default() -> Self {
        Self {
            at_from_checkpoint: false,
            at_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Write an oracle teacher file before training.
    pub oracle: bool,
    /// Gaussian noise added to oracle margins.
    pub sigma: f64,
    /// Scored negatives per training query in the oracle file.
    pub negatives_per_query: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            oracle: false,
            sigma: 0.0,
            negatives_per_query: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Learning rate as a fraction of `training.learning_rate`.
    pub lr_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr_scale: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub variations: Vec<VariationSpec>,
    /// Report tag for the queries being evaluated (e.g. a variation family).
    pub tag: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub loss: LossConfig,
    pub perturbation: PerturbationConfig,
    pub at: AtConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a JSON config (or defaults when `path` is `None`) and applies
    /// `key=value` overrides on dotted paths, e.g. `training.epochs=3`.
    /// Relative entries of `paths` in the file are taken relative to the
    /// file; overrides are taken as given.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = read_document::<RunConfig>(path)?;
        if let (Some(dir), Some(paths)) = (path.and_then(Path::parent), doc.get_mut("paths").and_then(Value::as_object_mut)) {
            for value in paths.values_mut() {
                if let Some(p) = value.as_str().map(Path::new).filter(|p| p.is_relative()) {
                    *value = Value::String(dir.join(p).to_string_lossy().into_owned());
                }
            }
        }
        let cfg: RunConfig = finish_document(doc, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.perturbation.validate()?;
        if self.training.batch_size == 0 || self.training.negatives == 0 {
            return Err(Error::Config("batch_size and negatives must be >= 1".into()));
        }
        if !(self.training.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.at.at_from_checkpoint && self.at.at_epochs == 0 {
            return Err(Error::Config("at_epochs must be >= 1 when resuming with AT".into()));
        }
        Ok(())
    }

    /// Stable-within-a-build digest of the model, loss and training
    /// sections, stored in checkpoints. File locations and the perturbation
    /// schedule are left out: a resume is expected to change them.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&(&self.model, &self.loss, &self.training)).expect("config serializes");
        let mut h = DefaultHasher::new();
        text.hash(&mut h);
        format!("{:016x}", h.finish())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(Error::file(path))
    }
}

/// Reads a JSON document (or `T::default()` when `path` is `None`) and
/// applies `key=value` overrides before deserializing.
pub fn load_document<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    finish_document(read_document::<T>(path)?, overrides)
}

fn read_document<T: Serialize + Default>(path: Option<&Path>) -> Result<Value> {
    Ok(match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(Error::file(p))?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => serde_json::to_value(T::default())?,
    })
}

fn finish_document<T: DeserializeOwned>(mut doc: Value, overrides: &[String]) -> Result<T> {
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

/// Sets `a.b.c=value` inside a JSON document. The value is parsed as JSON
/// when possible (numbers, booleans, null, arrays) and taken as a string
/// otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}
