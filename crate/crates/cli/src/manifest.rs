use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use egovpa::config::RunConfig;
use egovpa::training::Metrics;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command's run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Role to file name, relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub metrics: Metrics,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
            outputs: BTreeMap::new(),
            metrics: Metrics::new(),
        }
    }

    pub fn output(&mut self, role: &str, file: &str) {
        self.outputs.insert(role.into(), file.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
