use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use mmsr_core::trainer::TrainConfig;
use mmsr_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

/// Everything needed to reproduce one command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// The flags as resolved after defaults.
    pub flags: serde_json::Value,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub paths: BTreeMap<String, PathBuf>,
    pub started: String,
    pub finished: String,
    pub summary: serde_json::Value,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(command: &str, flags: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            flags: serde_json::to_value(flags).map_err(|e| Error::State(e.to_string()))?,
            model: None,
            train: None,
            seed: None,
            paths: BTreeMap::new(),
            started: now(),
            finished: String::new(),
            summary: serde_json::Value::Null,
        })
    }

    pub fn path(&mut self, role: &str, path: &Path) -> Result<()> {
        self.paths.insert(role.into(), std::path::absolute(path)?);
        Ok(())
    }

    pub fn finish(mut self, target: &Path) -> Result<()> {
        self.finished = now();
        let text = serde_json::to_string_pretty(&self).map_err(|e| Error::State(e.to_string()))?;
        fs::write(target, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format { offset: 0, msg: format!("manifest {}: {e}", path.display()) })
    }
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}
