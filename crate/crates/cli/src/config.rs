//! Run configuration: JSON file plus dotted-key overrides, merged over the
//! defaults with unknown-key and type checking.

use std::path::{Path, PathBuf};

use anyhow::Result;
use gma_core::analysis::AttnSource;
use gma_core::data::TaskSpec;
use gma_core::model::ModelConfig;
use gma_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus to train on instead of generating one.
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            checkpoint: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisFlags {
    /// Attention matrix used for alignment extraction.
    pub attention: AttnSource,
    /// Upper edges of the length buckets.
    pub bucket_edges: Vec<usize>,
    /// Write every attention record to `attention.jsonl`.
    pub dump_attention: bool,
}

impl Default for AnalysisFlags {
    fn default() -> Self {
        Self {
            attention: AttnSource::Gamma,
            bucket_edges: vec![10, 20, 30],
            dump_attention: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub paths: Paths,
    pub analysis: AnalysisFlags,
}

/// A problem with the configuration itself (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates
        .map(|c| {
            (
                strsim::jaro_winkler(&key.to_lowercase(), &c.to_lowercase()),
                c,
            )
        })
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// Merges `incoming` into `base`. Keys must exist in `base`, and values
/// must keep the JSON type of the default unless the default is null.
fn merge(base: &mut Value, incoming: Value, path: &mut Vec<String>) -> Result<()> {
    match (base, incoming) {
        (Value::Object(b), Value::Object(inc)) => {
            for (k, v) in inc {
                let Some(slot) = b.get_mut(&k) else {
                    let here = path.join(".");
                    let prefix = if here.is_empty() {
                        String::new()
                    } else {
                        format!("{here}.")
                    };
                    let hint = nearest(&k, b.keys())
                        .map(|n| format!("; did you mean {prefix}{n}?"))
                        .unwrap_or_default();
                    return Err(config_err(format!("unknown key {prefix}{k}{hint}")));
                };
                path.push(k);
                merge(slot, v, path)?;
                path.pop();
            }
            Ok(())
        }
        (slot @ Value::Null, v) => {
            *slot = v;
            Ok(())
        }
        (slot, Value::Null) if path.first().is_some_and(|p| p == "paths") => {
            *slot = Value::Null;
            Ok(())
        }
        (slot, v) => {
            if kind(slot) != kind(&v) {
                return Err(config_err(format!(
                    "type mismatch at {}: expected {}, got {}",
                    path.join("."),
                    kind(slot),
                    kind(&v)
                )));
            }
            *slot = v;
            Ok(())
        }
    }
}

/// Moves a top-level `gma` section under `model`.
fn canonicalize(mut v: Value) -> Value {
    if let Value::Object(top) = &mut v {
        if let Some(g) = top.remove("gma") {
            let model = top
                .entry("model")
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = model {
                match m.get_mut("gma") {
                    Some(Value::Object(existing)) => {
                        if let Value::Object(gm) = g {
                            existing.extend(gm);
                        }
                    }
                    _ => {
                        m.insert("gma".into(), g);
                    }
                }
            }
        }
    }
    v
}

/// Dotted key `a.b.c` and a value into `{"a":{"b":{"c":value}}}`.
fn nest(key: &str, value: Value) -> Result<Value> {
    if key.split('.').any(str::is_empty) {
        return Err(config_err(format!("malformed key {key:?}")));
    }
    let mut v = value;
    for part in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(canonicalize(v))
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {s:?} must look like key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn parse_json_text(text: &str, origin: &str) -> Result<Value> {
    if text.trim().is_empty() {
        return Ok(Value::Object(Map::new()));
    }
    serde_json::from_str(text).map_err(|e| {
        config_err(format!(
            "{origin}: malformed JSON at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })
}

/// Defaults, then the file, then the overrides in order.
pub fn build_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match file {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    build_config_from_text(text.as_deref(), overrides)
}

pub fn build_config_from_text(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::default())?;
    if let Some(t) = text {
        let v = parse_json_text(t, "config")?;
        if !v.is_object() {
            return Err(config_err(format!(
                "config must be a JSON object, got {}",
                kind(&v)
            )));
        }
        merge(&mut merged, canonicalize(v), &mut Vec::new())?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        merge(&mut merged, nest(&k, v)?, &mut Vec::new())?;
    }
    let cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| config_err(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: gma_core::Result<()>, section: &str| {
            r.map_err(|e| config_err(format!("{section}: {e}")))
        };
        wrap(self.model.validate(), "model")?;
        wrap(self.train.validate(), "train")?;
        wrap(self.task.validate(), "task")?;
        if let Some(c) = &self.paths.corpus {
            if !c.exists() {
                return Err(config_err(format!(
                    "paths.corpus {} does not exist",
                    c.display()
                )));
            }
        }
        if let Some(c) = &self.paths.checkpoint {
            if !c.exists() {
                return Err(config_err(format!(
                    "paths.checkpoint {} does not exist",
                    c.display()
                )));
            }
        }
        Ok(())
    }
}
