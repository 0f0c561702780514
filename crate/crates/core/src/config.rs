//! Run configuration: one serializable struct covering both training
//! stages, the joint space, the synthetic dataset and the defense chain,
//! with dotted-path overrides and a content digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::encoders::JointSpaceConfig;
use crate::error::{Error, Result};
use crate::inversion::Stage1Config;
use crate::synthdata::SyntheticSpec;

/// All run hyperparameters. Unknown fields in a file are an error so a
/// typo cannot silently fall back to a default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub joint_space: JointSpaceConfig,
    pub stage1: Stage1Config,
    pub stage2: AttackConfig,
    pub dataset: SyntheticSpec,
    /// Comma-separated defense chain (empty = no defense), e.g.
    /// `jpeg:60,randomization:0.875-1.0`.
    pub defenses: String,
}

impl RunConfig {
    /// Load from YAML (`.yaml`/`.yml`) or JSON (`.json`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Ok(serde_json::from_str(&text)?),
            Some("yaml") | Some("yml") => serde_yaml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            other => Err(Error::Config(format!(
                "unsupported config extension {other:?} (want yaml, yml or json)"
            ))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::to_string_pretty(self)?,
            Some("yaml") | Some("yml") => serde_yaml::to_string(self)
                .map_err(|e| Error::Config(e.to_string()))?,
            other => {
                return Err(Error::Config(format!(
                    "unsupported config extension {other:?} (want yaml, yml or json)"
                )))
            }
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Apply one `dotted.path=value` override, e.g. `stage2.epsilon` with
    /// `0.05`. Values parse as JSON first and fall back to plain strings.
    pub fn apply_override(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let mut cursor = &mut root;
        let segments: Vec<&str> = path.split('.').collect();
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("bad override path '{path}'")));
        }
        for (i, seg) in segments.iter().enumerate() {
            let obj = cursor.as_object_mut().ok_or_else(|| {
                Error::Config(format!("'{}' is not a section", segments[..i].join(".")))
            })?;
            let slot = obj
                .get_mut(*seg)
                .ok_or_else(|| Error::Config(format!("unknown config field '{path}'")))?;
            if i + 1 == segments.len() {
                *slot = parsed;
                break;
            }
            cursor = slot;
        }
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("override {path}={value}: {e}")))?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config always serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
