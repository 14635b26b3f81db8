//! Run configuration: one JSON document covering every stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::pruner::SparsitySpec;
use crate::scoring::ScoreConfig;
use crate::synth;
use crate::train::TrainConfig;

/// Input files, relative paths resolved against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub corpus: PathBuf,
    pub score_pairs: PathBuf,
    pub eval_pairs: PathBuf,
    pub probe_train: Option<PathBuf>,
    pub probe_test: Option<PathBuf>,
}

impl Default for DataPaths {
    fn default() -> Self {
        let d = Path::new("data");
        DataPaths {
            corpus: d.join(synth::CORPUS_FILE),
            score_pairs: d.join(synth::SCORE_PAIRS_FILE),
            eval_pairs: d.join(synth::EVAL_PAIRS_FILE),
            probe_train: Some(d.join(synth::PROBE_TRAIN_FILE)),
            probe_test: Some(d.join(synth::PROBE_TEST_FILE)),
        }
    }
}

impl DataPaths {
    /// Every configured path that does not exist.
    pub fn missing(&self) -> Vec<&Path> {
        [Some(&self.corpus), Some(&self.score_pairs), Some(&self.eval_pairs), self.probe_train.as_ref(), self.probe_test.as_ref()]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .filter(|p| !p.exists())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sparsities: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Write elapsed seconds per row; when off the column holds 0 so
    /// reports from identical runs are byte-identical.
    pub record_wallclock: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut sparsities: Vec<f64> = (1..=10).map(|i| i as f64 / 100.0).collect();
        sparsities.extend((2..=5).map(|i| i as f64 / 10.0));
        SweepConfig {
            sparsities,
            lambdas: vec![0.25, 0.5, 0.75],
            record_wallclock: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub probe: ProbeConfig,
    /// Sparsity used by the single-shot prune stage.
    pub prune_sparsity: f64,
    pub sweep: SweepConfig,
    pub data: DataPaths,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            probe: ProbeConfig::default(),
            prune_sparsity: 0.1,
            sweep: SweepConfig::default(),
            data: DataPaths::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.score.validate()?;
        SparsitySpec::new(self.prune_sparsity)?;
        if self.sweep.sparsities.is_empty() || self.sweep.lambdas.is_empty() {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        for &s in &self.sweep.sparsities {
            SparsitySpec::new(s)?;
        }
        for &l in &self.sweep.lambdas {
            ScoreConfig { lambda: l, ..self.score.clone() }.validate()?;
        }
        if self.probe.iterations == 0 || !(self.probe.learning_rate > 0.0) {
            return Err(Error::Config("probe needs positive iterations and learning rate".into()));
        }
        if self.data.probe_train.is_some() != self.data.probe_test.is_some() {
            return Err(Error::Config("probe_train and probe_test must be set together".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => "{}".to_string(),
        };
        RunConfig::from_json(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is parsed as JSON and kept as a string otherwise.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key `{key}` has an empty segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}
