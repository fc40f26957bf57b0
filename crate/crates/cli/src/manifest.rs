use crate::error::{CliError, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Record of one command run, written once the run has finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the output root) to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    pub duration_secs: f64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The manifest with timing fields cleared, for run-to-run comparison.
    pub fn without_timing(&self) -> RunManifest {
        RunManifest {
            duration_secs: 0.0,
            finished_unix: 0,
            ..self.clone()
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    root: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, root: &Path, config: &impl Serialize) -> Result<Self> {
        Ok(ManifestBuilder {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            root: root.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.output_with_hash(path, hash);
        Ok(())
    }

    /// Records an output whose identity hash is computed by the caller
    /// (reports hash their content without timestamps).
    pub fn output_with_hash(&mut self, path: &Path, hash: String) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        self.outputs.insert(rel.display().to_string(), hash);
    }

    /// Writes `<root>/<command>.manifest.json` atomically and returns the manifest.
    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: TOOL_VERSION.to_string(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
            finished_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let path = self
            .root
            .join(format!("{}.manifest.json", manifest.command));
        neat_core::model::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
            .context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_written_whole() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.txt");
        std::fs::write(&out, "hello").unwrap();
        let mut b = ManifestBuilder::new("demo", dir.path(), &serde_json::json!({"k": 1})).unwrap();
        b.output(&out).unwrap();
        let m = b.finish().unwrap();
        let back = RunManifest::load(dir.path().join("demo.manifest.json")).unwrap();
        assert_eq!(back, m);
        assert!(back.outputs.contains_key("a.txt"));
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
