//! Run configuration: one flat `dotted.key = value` text file, overridable
//! key by key, resolved into typed sub-configs with a canonical digest.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::CorpusConfig;
use crate::doll::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::models::TrainConfig;
use crate::training::FinetuneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// One plane: observation 0.
    Lung,
    /// One plane: observation 2.
    Infection,
    /// Every observation plane.
    Multi,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Lung, Task::Infection, Task::Multi];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Lung => "lung",
            Task::Infection => "infection",
            Task::Multi => "multi",
        }
    }

    /// Observation indices used as target planes.
    pub fn channels(&self, n_observations: usize) -> Vec<usize> {
        match self {
            Task::Lung => vec![0],
            Task::Infection => vec![2],
            Task::Multi => (0..n_observations).collect(),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config("downstream.task", format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneInit {
    /// Segmentation model pre-trained on localization masks.
    Doll,
    Scratch,
    /// Backbone of a `segnet` classifier trained on image labels.
    ClassifierBackbone,
}

impl FinetuneInit {
    pub fn as_str(&self) -> &'static str {
        match self {
            FinetuneInit::Doll => "doll",
            FinetuneInit::Scratch => "scratch",
            FinetuneInit::ClassifierBackbone => "classifier-backbone",
        }
    }
}

impl std::str::FromStr for FinetuneInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [FinetuneInit::Doll, FinetuneInit::Scratch, FinetuneInit::ClassifierBackbone]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config("downstream.init", format!("unknown init `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    pub task: Task,
    pub init: FinetuneInit,
    /// Labeled training images.
    pub shots: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub arch: String,
    pub threshold: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            task: Task::Multi,
            init: FinetuneInit::Doll,
            shots: 20,
            n_val: 100,
            n_test: 200,
            arch: "segnet".into(),
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
    pub classifier: TrainConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub downstream: DownstreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "default".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            pipeline: PipelineConfig::default(),
            classifier: TrainConfig::default(),
            pretrain: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig::default(),
            downstream: DownstreamConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::config("run_id", "must be non-empty and use [A-Za-z0-9._-]"));
        }
        self.corpus.validate()?;
        self.pipeline.validate()?;
        self.classifier.validate("classifier")?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate()?;
        for m in 0..self.pipeline.ensemble_size {
            let arch = self.pipeline.arch_of(m);
            if !crate::models::CLASSIFIER_ARCHS.contains(&arch) {
                return Err(Error::config("pipeline.ensemble_archs", format!("unknown architecture `{arch}`")));
            }
        }
        if !crate::models::SEGMENTATION_ARCHS.contains(&self.downstream.arch.as_str()) {
            return Err(Error::config("downstream.arch", format!("unknown architecture `{}`", self.downstream.arch)));
        }
        if self.downstream.shots == 0 || self.downstream.n_val == 0 || self.downstream.n_test == 0 {
            return Err(Error::config("downstream.shots", "split sizes must be positive"));
        }
        if self.downstream.task == Task::Infection && self.corpus.n_observations < 3 {
            return Err(Error::config("downstream.task", "infection needs at least 3 observations"));
        }
        if !(self.downstream.threshold > 0.0 && self.downstream.threshold < 1.0) {
            return Err(Error::config("downstream.threshold", "must lie in (0, 1)"));
        }
        if self.corpus.image_size % 4 != 0 {
            return Err(Error::config("corpus.image_size", "must be a multiple of 4 for the segmentation network"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        formats::digest(self)
    }

    /// Parses `key = value` lines over the defaults, then applies
    /// `overrides` in order. `#` starts a comment.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected `key = value`"))?;
            set_path(&mut tree, k.trim(), v.trim())?;
        }
        for (k, v) in overrides {
            set_path(&mut tree, k, v)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key = value` rendering that parses back to the same config.
    pub fn to_text(&self) -> Result<String> {
        let tree = serde_json::to_value(self)?;
        let mut lines = Vec::new();
        flatten(&tree, String::new(), &mut lines);
        Ok(lines.join("\n") + "\n")
    }
}

fn flatten(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, item) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(item, key, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        Value::Array(items) if items.iter().all(|i| i.is_string()) => {
            let parts: Vec<&str> = items.iter().filter_map(|i| i.as_str()).collect();
            out.push(format!("{prefix} = {}", parts.join(",")));
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Sets `path` in `tree`, parsing `raw` by the type of the default there.
fn set_path(tree: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut node = &mut *tree;
    for part in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::config(path, "unknown key"))?;
    }
    let bad = |why: &str| Error::config(path, format!("cannot parse `{raw}`: {why}"));
    *node = match &*node {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Bool(_) => Value::Bool(match raw {
            "true" | "on" | "yes" => true,
            "false" | "off" | "no" => false,
            _ => return Err(bad("expected a boolean")),
        }),
        Value::Number(_) => {
            let v: Value = serde_json::from_str(raw).map_err(|_| bad("expected a number"))?;
            if !v.is_number() {
                return Err(bad("expected a number"));
            }
            v
        }
        Value::Array(items) if items.first().is_none_or(|i| i.is_string()) => Value::Array(
            raw.split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_string()))
                .collect(),
        ),
        Value::Object(_) => return Err(Error::config(path, "names a section, not a value")),
        _ => serde_json::from_str(raw).map_err(|e| bad(&e.to_string()))?,
    };
    Ok(())
}
