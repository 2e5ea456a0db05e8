//! Run configuration files: JSON with `model`, `train`, `data` and `infer`
//! sections, plus `section.key=value` command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::infer::DEFAULT_OVERLAP;
use crate::model::UNesTConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    /// Held-out cases scored during training.
    pub val_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub overlap: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            overlap: DEFAULT_OVERLAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: UNesTConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub infer: InferConfig,
}

/// Sets `a.b.c` in `root`. Values parse as JSON when possible and fall back
/// to plain strings.
fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {item:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a section")))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key}: parent is not a section")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for item in overrides {
            apply_override(&mut root, item)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.infer.overlap) {
            return Err(Error::Config(format!(
                "infer.overlap must lie in [0, 1), got {}",
                self.infer.overlap
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        serde_json::json!({ "model": UNesTConfig::micro() }).to_string()
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse(
            &base(),
            &[
                "train.total_steps=20".into(),
                "train.warmup_steps=5".into(),
                "data.train_dir=some/dir".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.total_steps, 20);
        assert_eq!(cfg.data.train_dir.as_deref(), Some(Path::new("some/dir")));
    }

    #[test]
    fn unknown_keys_rejected() {
        for o in ["train.bogus=1", "nosuch.key=2", "model.dims.x=1"] {
            assert!(RunConfig::parse(&base(), &[o.into()]).is_err(), "{o}");
        }
        assert!(matches!(
            RunConfig::parse(&base(), &["novalue".into()]),
            Err(Error::Usage(_))
        ));
    }
}
