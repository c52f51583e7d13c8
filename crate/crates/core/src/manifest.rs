//! Run manifest: per-stage input hashes and content hashes of every artifact
//! a stage wrote, used to skip stages whose inputs are unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the config plus the artifact hashes of upstream stages.
    pub input_hash: String,
    /// Relative artifact path → SHA-256 of its content.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// Reserved seed ranges by purpose, as `first..=last`.
    pub seed_ranges: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn is_complete(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }

    /// Whether `stage` is recorded with `input_hash` and every artifact on
    /// disk still matches its recorded hash.
    pub fn is_current(&self, root: &Path, stage: &str, input_hash: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else { return false };
        rec.input_hash == input_hash
            && rec.artifacts.iter().all(|(rel, h)| fs::read(root.join(rel)).is_ok_and(|b| &sha256_hex(&b) == h))
    }

    /// Artifacts of `stage` that are missing or no longer match their hash.
    pub fn stale_artifacts(&self, root: &Path, stage: &str) -> Vec<String> {
        let Some(rec) = self.stages.get(stage) else { return vec![format!("{stage}/ (stage not run)")] };
        rec.artifacts
            .iter()
            .filter(|(rel, h)| !fs::read(root.join(rel)).is_ok_and(|b| &sha256_hex(&b) == *h))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

/// Collects the files one stage writes, hashing each as it goes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf(), written: BTreeMap::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let bytes = bytes.as_ref();
        fs::write(&path, bytes)?;
        self.written.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn finish(self) -> BTreeMap<String, String> {
        self.written
    }
}

/// Reads an artifact, reporting its path on failure.
pub fn read_artifact(root: &Path, rel: &str) -> Result<String> {
    fs::read_to_string(root.join(rel)).map_err(|_| Error::MissingArtifacts(vec![rel.to_string()]))
}
