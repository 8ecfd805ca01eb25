//! Run manifests.
//!
//! The manifest hash covers everything except wall time, so rerunning a
//! command on the same inputs stamps the same hash into every artifact.

use std::path::{Path, PathBuf};
use std::time::Instant;

use layer_reuse::artifact::{sha256_hex, to_json_bytes, write_bytes};
use layer_reuse::Result;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub command: String,
    /// Effective configuration after flags, config file and defaults merge.
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ManifestRecord<'a> {
    version: &'static str,
    #[serde(flatten)]
    manifest: &'a RunManifest,
    wall_time_ms: u128,
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    /// Sidecar path: `<command>.manifest.json` next to the first output.
    pub fn path(&self) -> PathBuf {
        let dir = self
            .outputs
            .first()
            .and_then(|o| Path::new(o).parent().map(Path::to_path_buf))
            .unwrap_or_default();
        dir.join(format!("{}.manifest.json", self.command))
    }

    pub fn write(&self, started: Instant) -> Result<()> {
        let record = ManifestRecord {
            version: layer_reuse::artifact::FORMAT_VERSION,
            manifest: self,
            wall_time_ms: started.elapsed().as_millis(),
        };
        let hash = self.hash();
        write_bytes(&self.path(), &to_json_bytes(&record, Some(&hash))?)
    }
}
