//! The run manifest: which stages completed, under which config checksums,
//! with what artifacts and wall-clock cost. Reruns consult it to skip fresh
//! stages unless forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_checksum: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub checksum: String,
    pub completed: bool,
    pub wall_ms: u128,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<RunManifest> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// A stage is fresh when it completed under the same checksum and all of
    /// its recorded artifacts still exist.
    pub fn is_fresh(&self, run_dir: &Path, stage: &str, checksum: &str) -> bool {
        self.stages.get(stage).is_some_and(|record| {
            record.completed
                && record.checksum == checksum
                && record.artifacts.iter().all(|a| run_dir.join(a).exists())
        })
    }

    pub fn record(
        &mut self,
        stage: &str,
        checksum: String,
        wall_ms: u128,
        artifacts: Vec<PathBuf>,
    ) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                checksum,
                completed: true,
                wall_ms,
                artifacts,
            },
        );
    }

    pub fn total_wall_ms(&self) -> u128 {
        self.stages.values().map(|s| s.wall_ms).sum()
    }
}
