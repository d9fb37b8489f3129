//! Run configuration: one JSON document, strict about unknown keys, with
//! dotted `key=value` overrides applied before validation.

use crate::error::{PmnError, Result};
use crate::harness::{StackConfig, TaskBudget, TrainConfig};
use crate::tasks::{ModelConfig, QuestionMix, TaskKind, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;

/// Dataset drawn by `gen-data` and by single-task training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
    pub per_scene: usize,
    pub sigma: f64,
    /// Defaults to the task's own mix.
    pub mix: Option<QuestionMix>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: 2000,
            test: 500,
            per_scene: 3,
            sigma: 0.1,
            mix: None,
        }
    }
}

/// Seeds, budgets and fractions of ablation and low-data runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub budgets: BTreeMap<TaskKind, TaskBudget>,
    pub fractions: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            batch_size: 32,
            budgets: StackConfig::default().budgets,
            fractions: vec![0.05, 0.1, 0.25, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

fn bad<T>(path: &str, msg: impl Into<String>) -> Result<T> {
    Err(PmnError::Config {
        path: path.to_string(),
        msg: msg.into(),
    })
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.sigma >= 0.0 && self.data.sigma.is_finite()) {
            return bad("data.sigma", "must be finite and nonnegative");
        }
        if self.data.per_scene == 0 {
            return bad("data.per_scene", "must be positive");
        }
        if let Some(m) = &self.data.mix {
            m.validate()?;
        }
        if self.experiment.seeds.is_empty() {
            return bad("experiment.seeds", "need at least one seed");
        }
        if self.experiment.batch_size == 0 {
            return bad("experiment.batch_size", "must be positive");
        }
        for (i, &f) in self.experiment.fractions.iter().enumerate() {
            if !(f > 0.0 && f <= 1.0) {
                return bad(&format!("experiment.fractions[{i}]"), "must be in (0, 1]");
            }
        }
        for (t, b) in &self.experiment.budgets {
            if b.train == 0 {
                return bad(
                    &format!("experiment.budgets.{}.train", t.name()),
                    "must be positive",
                );
            }
            if let Some(m) = &b.mix {
                m.validate()?;
            }
        }
        Ok(())
    }

    /// Canonical form: defaults filled, trainable-children list sorted and
    /// deduplicated, repeated seeds dropped.
    pub fn normalized(mut self) -> Result<Self> {
        if let Some(c) = &mut self.train.trainable_children {
            c.sort();
            c.dedup();
        }
        let mut seen = Vec::with_capacity(self.experiment.seeds.len());
        for s in std::mem::take(&mut self.experiment.seeds) {
            if !seen.contains(&s) {
                seen.push(s);
            }
        }
        self.experiment.seeds = seen;
        self.validate()?;
        Ok(self)
    }

    pub fn stack(&self) -> StackConfig {
        StackConfig {
            world: self.world.clone(),
            model: self.model.clone(),
            sigma: self.data.sigma,
            per_scene: self.data.per_scene,
            batch_size: self.experiment.batch_size,
            budgets: self.experiment.budgets.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a document, applies overrides and normalizes. An empty document
/// yields the full default config.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<Config> {
    let mut doc: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| PmnError::Config {
            path: format!("line {} column {}", e.line(), e.column()),
            msg: e.to_string(),
        })?
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    from_value(doc)?.normalized()
}

/// Deserializes with the failing field's path in the error.
pub fn from_value(doc: Value) -> Result<Config> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        PmnError::Config {
            path: if path == "." { "(root)".into() } else { path },
            msg: e.into_inner().to_string(),
        }
    })
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = match spec.split_once('=') {
        Some((k, v)) if !k.is_empty() => (k, v),
        _ => return bad(spec, "override must look like key.path=value"),
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if !cur.is_object() {
            return bad(&parts[..i].join("."), "not an object");
        }
        let map = cur.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert(p.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(parse_config("", &[]).unwrap(), Config::default());
        assert_eq!(parse_config("{}", &[]).unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let err = parse_config(r#"{"model": {"hiden": 3}}"#, &[]).unwrap_err();
        match err {
            PmnError::Config { path, msg } => {
                assert_eq!(path, "model.hiden");
                assert!(msg.contains("hiden"), "{msg}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn zero_fraction_is_rejected() {
        let err = parse_config("", &["train.fraction=0".into()]).unwrap_err();
        assert!(
            matches!(err, PmnError::Config { ref path, .. } if path == "train.fraction"),
            "{err}"
        );
        assert!(parse_config("", &["experiment.fractions=[0.5,0]".into()]).is_err());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = parse_config(
            "",
            &[
                "model.hidden=16".into(),
                "train.task=cnt".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.train.task, TaskKind::Cnt);
        assert_eq!(c.seed, 9);
        assert!(parse_config("", &["nokey".into()]).is_err());
    }

    #[test]
    fn wrong_type_names_the_field() {
        let err = parse_config(r#"{"train": {"epochs": "many"}}"#, &[]).unwrap_err();
        assert!(
            matches!(err, PmnError::Config { ref path, .. } if path == "train.epochs"),
            "{err}"
        );
    }
}
