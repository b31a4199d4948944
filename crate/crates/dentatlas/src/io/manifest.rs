//! Cohort manifest: a JSON list of per-subject volume + label paths,
//! written by `phantom make` and consumed by `atlas build` and friends.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub subjects: Vec<ManifestEntry>,
}

impl CohortManifest {
    pub fn read(path: &Path) -> Result<CohortManifest> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: CohortManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
        if manifest.subjects.is_empty() {
            return Err(Error::Config(format!(
                "manifest {} lists no subjects",
                path.display()
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self)
                .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?,
        )
        .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Entry paths resolved relative to the manifest's directory.
    pub fn resolved(&self, manifest_path: &Path) -> Vec<ManifestEntry> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.subjects
            .iter()
            .map(|e| ManifestEntry {
                id: e.id.clone(),
                volume: resolve(base, &e.volume),
                labels: resolve(base, &e.labels),
            })
            .collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
