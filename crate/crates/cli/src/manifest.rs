use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One output file, held in memory until it is written or checked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(path: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            path: path.into(),
            bytes: bytes.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub master_seed: u64,
    pub out_dir: String,
    pub version: String,
    pub duration_secs: f64,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn version_stamp() -> String {
    match option_env!("SOFTIMIT_GIT_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl ExperimentManifest {
    pub fn entries(artifacts: &[Artifact]) -> Vec<ArtifactEntry> {
        let mut entries: Vec<ArtifactEntry> = artifacts
            .iter()
            .map(|a| ArtifactEntry {
                path: a.path.clone(),
                sha256: sha256_hex(&a.bytes),
                bytes: a.bytes.len(),
            })
            .collect();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        entries
    }

    pub fn read(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A file whose content differs from what a manifest recorded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub path: String,
    pub expected: Option<String>,
    pub actual: Option<String>,
}

/// Compares freshly produced artifacts with a stored manifest, in both
/// directions.
pub fn compare(manifest: &ExperimentManifest, artifacts: &[Artifact]) -> Vec<Mismatch> {
    let fresh = ExperimentManifest::entries(artifacts);
    let mut out = Vec::new();
    for e in &manifest.artifacts {
        let actual = fresh.iter().find(|f| f.path == e.path).map(|f| f.sha256.clone());
        if actual.as_deref() != Some(e.sha256.as_str()) {
            out.push(Mismatch {
                path: e.path.clone(),
                expected: Some(e.sha256.clone()),
                actual,
            });
        }
    }
    for f in &fresh {
        if !manifest.artifacts.iter().any(|e| e.path == f.path) {
            out.push(Mismatch {
                path: f.path.clone(),
                expected: None,
                actual: Some(f.sha256.clone()),
            });
        }
    }
    out
}

/// Also checks that the files on disk still match the manifest.
pub fn verify_on_disk(out_dir: &Path, manifest: &ExperimentManifest) -> Vec<Mismatch> {
    manifest
        .artifacts
        .iter()
        .filter_map(|e| {
            let actual = std::fs::read(out_dir.join(&e.path)).ok().map(|b| sha256_hex(&b));
            (actual.as_deref() != Some(e.sha256.as_str())).then(|| Mismatch {
                path: e.path.clone(),
                expected: Some(e.sha256.clone()),
                actual,
            })
        })
        .collect()
}

pub fn write_artifacts(out_dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let path = out_dir.join(&a.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, &a.bytes).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
