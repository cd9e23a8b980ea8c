//! Run-directory convention: one directory per study or search, holding a
//! config snapshot (written before any compute), incremental logs, and final
//! artifacts. Reports are assembled purely from these files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

/// Snapshot written to `config.json` when a run directory is opened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Which command owns this directory.
    pub command: String,
    /// Layer-plan notation, e.g. `E / L`.
    pub plan: String,
    /// Where the candidate genotypes came from: a source dataset name for
    /// transfer runs, `random` for sampled baselines, absent otherwise.
    pub arch_source: Option<String>,
    pub experiment: ExperimentConfig,
}

/// Handle to one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Opens (creating if needed) a run directory and pins its config
    /// snapshot. Reopening with a different snapshot is refused: a directory
    /// records exactly one configuration, so resuming can never silently
    /// change what is being measured.
    pub fn open(root: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("creating run directory {}", root.display()))?;
        let dir = RunDir { root: root.to_path_buf() };
        let path = dir.config_file();
        if path.exists() {
            let existing: RunConfig = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?;
            if existing != *config {
                bail!(
                    "{} already holds a different configuration; use a fresh --out directory",
                    root.display()
                );
            }
        } else {
            std::fs::write(&path, serde_json::to_string_pretty(config)?)?;
        }
        Ok(dir)
    }

    /// Opens an existing run directory read-only (for reports).
    pub fn read(root: &Path) -> Result<(Self, RunConfig)> {
        let dir = RunDir { root: root.to_path_buf() };
        let path = dir.config_file();
        let config: RunConfig = serde_json::from_str(
            &std::fs::read_to_string(&path)
                .with_context(|| format!("{} is not a run directory (no config.json)", root.display()))?,
        )?;
        Ok((dir, config))
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.json")
    }

    /// Incremental JSONL trial log.
    pub fn study_log(&self) -> PathBuf {
        self.root.join("study.jsonl")
    }

    /// Best-trial summary with dev and test reports.
    pub fn best_file(&self) -> PathBuf {
        self.root.join("best.json")
    }

    /// Candidate genotypes, one per line.
    pub fn arch_file(&self) -> PathBuf {
        self.root.join("architectures.txt")
    }

    /// Search checkpoint (full state).
    pub fn checkpoint_file(&self) -> PathBuf {
        self.root.join("search.json")
    }

    /// Per-epoch search records.
    pub fn history_file(&self) -> PathBuf {
        self.root.join("history.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cellsearch_core::data::TaskKind;
    use cellsearch_core::models::ModelKind;

    fn sample_config(seed: u64) -> RunConfig {
        RunConfig {
            command: "tune-baseline".into(),
            plan: "L".into(),
            arch_source: None,
            experiment: ExperimentConfig::synthetic(TaskKind::Classification, ModelKind::Blm, seed),
        }
    }

    fn temp_root(name: &str) -> PathBuf {
        let dir = std::env::temp_dir()
            .join("cellsearch-rundir-tests")
            .join(format!("{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn reopening_with_the_same_config_is_fine_but_a_changed_one_is_refused() {
        let root = temp_root("reopen");
        let config = sample_config(1);
        RunDir::open(&root, &config).unwrap();
        RunDir::open(&root, &config).unwrap();
        let err = RunDir::open(&root, &sample_config(2)).unwrap_err();
        assert!(err.to_string().contains("different configuration"));
    }

    #[test]
    fn snapshot_round_trips_through_read() {
        let root = temp_root("read");
        let config = sample_config(3);
        RunDir::open(&root, &config).unwrap();
        let (_, back) = RunDir::read(&root).unwrap();
        assert_eq!(back, config);
        assert!(RunDir::read(&temp_root("missing")).is_err());
    }
}
