use std::collections::BTreeMap;
use std::path::Path;

use disentangle_seg::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a subcommand consumed and produced, written as `manifest.json` into
/// its output directory. Two runs with equal manifests are bit-identical on
/// one platform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub arguments: BTreeMap<String, String>,
    /// Resolved configuration, when the subcommand takes one.
    pub config: Option<serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub checkpoint_ids: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.arguments.insert(key.to_string(), value.to_string());
        self
    }

    pub fn seed(&mut self, key: &str, value: u64) -> &mut Self {
        self.seeds.insert(key.to_string(), value);
        self
    }

    pub fn dataset(&mut self, key: &str, hash: String) -> &mut Self {
        self.dataset_hashes.insert(key.to_string(), hash);
        self
    }

    pub fn checkpoint(&mut self, key: &str, id: String) -> &mut Self {
        self.checkpoint_ids.insert(key.to_string(), id);
        self
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }
}
