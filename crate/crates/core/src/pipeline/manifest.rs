use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
    pub completed: bool,
}

/// Stage bookkeeping for one output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: impl Into<String>) -> Self {
        RunManifest {
            config_hash: config_hash.into(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the manifest in `dir`, or starts a new one. A stored hash that
    /// differs from `config_hash` is an error unless `force` is set, in which
    /// case the old manifest is discarded.
    pub fn open(dir: &Path, config_hash: &str, force: bool) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let stored: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if stored.config_hash == config_hash {
            Ok(stored)
        } else if force {
            log::warn!("config changed; discarding manifest {}", path.display());
            Ok(Self::new(config_hash))
        } else {
            Err(Error::ConfigHashMismatch {
                stored: stored.config_hash,
                current: config_hash.to_string(),
            })
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Whether `stage` completed and all of its artifacts still exist.
    pub fn is_complete(&self, dir: &Path, stage: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|s| s.completed && s.artifacts.iter().all(|a| dir.join(a).exists()))
    }

    pub fn require(&self, dir: &Path, stage: &str) -> Result<&StageEntry> {
        match self.stages.get(stage) {
            Some(s) if self.is_complete(dir, stage) => Ok(s),
            _ => Err(Error::MissingArtifact {
                stage: stage.to_string(),
                path: dir.to_path_buf(),
            }),
        }
    }

    pub fn record(&mut self, stage: &str, artifacts: Vec<PathBuf>, seconds: f64) {
        self.stages.insert(
            stage.to_string(),
            StageEntry {
                artifacts,
                seconds,
                completed: true,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_mismatch_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("a");
        m.record("s", vec![], 1.0);
        m.save(dir.path()).unwrap();
        assert!(RunManifest::open(dir.path(), "a", false).unwrap().is_complete(dir.path(), "s"));
        assert!(matches!(
            RunManifest::open(dir.path(), "b", false),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(RunManifest::open(dir.path(), "b", true).unwrap().stages.is_empty());
    }

    #[test]
    fn missing_artifact_marks_stage_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("a");
        m.record("s", vec!["gone.bin".into()], 1.0);
        assert!(!m.is_complete(dir.path(), "s"));
        assert!(m.require(dir.path(), "s").is_err());
    }
}
