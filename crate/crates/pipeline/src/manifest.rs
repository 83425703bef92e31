//! Content hashes and per-stage manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let bytes =
        std::fs::read(path).map_err(|_| PipelineError::MissingArtifact(path.to_path_buf()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Input files keyed by path relative to the artifacts root (external
    /// inputs keep their given path).
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

/// Collects the files a stage reads and writes under one artifacts root.
pub struct ManifestBuilder<'a> {
    root: &'a Path,
    manifest: Manifest,
}

impl<'a> ManifestBuilder<'a> {
    pub fn new(root: &'a Path, stage: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            root,
            manifest: Manifest {
                stage: stage.to_string(),
                config_hash: config_hash.to_string(),
                seed,
                inputs: BTreeMap::new(),
                artifacts: BTreeMap::new(),
            },
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn input(&mut self, path: &Path) -> Result<(), PipelineError> {
        let h = hash_file(path)?;
        self.manifest.inputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) -> Result<(), PipelineError> {
        let h = hash_file(path)?;
        self.manifest.artifacts.insert(self.key(path), h);
        Ok(())
    }

    pub fn write(self, stage_dir: &Path) -> Result<Manifest, PipelineError> {
        write_json(&stage_dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_fail(path, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| PipelineError::MissingArtifact(path.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::StageFailed {
        stage: "load",
        message: format!("{}: {e}", path.display()),
    })
}

/// JSON-lines file, one record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| PipelineError::MissingArtifact(path.to_path_buf()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::StageFailed {
                stage: "load",
                message: format!("{} line {}: {e}", path.display(), i + 1),
            })
        })
        .collect()
}

fn io_fail(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::StageFailed {
        stage: "io",
        message: format!("{}: {e}", path.display()),
    }
}

/// All artifact hashes of every manifest under `root`, keyed by stage.
pub fn artifact_hashes(
    root: &Path,
) -> Result<BTreeMap<String, BTreeMap<String, String>>, PipelineError> {
    let mut out = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|_| PipelineError::MissingArtifact(root.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let m: Manifest = read_json(&d.join(MANIFEST_FILE))?;
        out.insert(m.stage, m.artifacts);
    }
    Ok(out)
}
