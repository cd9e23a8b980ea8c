//! Report assembly: a pure function of run-directory contents, rendered as
//! TSV and as an aligned table with dev/test columns per configuration.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

use cellsearch_core::hpt::load_study_log;

use crate::commands::{assignment_arch, BestTrial};
use crate::rundir::RunDir;

/// One study's line in the experiment table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub embedding: String,
    pub model: String,
    /// Per-layer cell notation: `L`, `E`, `RND`, layered as `E / L`.
    pub cells: String,
    /// Dataset the genotypes came from (transfer runs) or `random`.
    pub arch_source: Option<String>,
    pub trials: usize,
    pub failed: usize,
    pub dev: Option<f64>,
    pub test: Option<f64>,
    /// Winning genotype, when the study tuned over architectures.
    pub arch: Option<String>,
    /// Dev metric ties the winner shares with other trials.
    pub tied: bool,
    /// Objective wall-clock summed over the study log.
    pub hpt_seconds: f64,
    /// True while the study has no best-trial summary yet.
    pub pending: bool,
    pub run_dir: PathBuf,
}

/// The assembled report plus provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub code_version: String,
    pub generated_unix: u64,
}

fn row_from_dir(dir: &Path) -> Result<ReportRow> {
    let (run, config) = RunDir::read(dir)?;
    let model = match config.experiment.model.kind {
        cellsearch_core::models::ModelKind::Blm => "BLM",
        cellsearch_core::models::ModelKind::Esim => "ESIM",
    };
    let trials = if run.study_log().exists() {
        load_study_log(&run.study_log())?
    } else {
        Vec::new()
    };
    let failed = trials
        .iter()
        .filter(|t| matches!(t.status, cellsearch_core::hpt::TrialStatus::Failed(_)))
        .count();
    let hpt_seconds = trials.iter().map(|t| t.seconds).sum();

    let best: Option<BestTrial> = match std::fs::read_to_string(run.best_file()) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    Ok(ReportRow {
        dataset: config.experiment.dataset.name().to_string(),
        embedding: config.experiment.embedding.describe(),
        model: model.to_string(),
        cells: config.plan.clone(),
        arch_source: config.arch_source.clone(),
        trials: trials.len(),
        failed,
        dev: best.as_ref().map(|b| b.dev.primary),
        test: best.as_ref().map(|b| b.test.primary),
        arch: best
            .as_ref()
            .and_then(|b| assignment_arch(&b.assignment).map(str::to_string)),
        tied: best.as_ref().is_some_and(|b| !b.tied_with.is_empty()),
        hpt_seconds,
        pending: best.is_none(),
        run_dir: dir.to_path_buf(),
    })
}

/// Builds the table from run directories, stable-sorted by
/// (dataset, model, cells, source).
pub fn assemble_report(dirs: &[PathBuf]) -> Result<ExperimentReport> {
    let mut rows = dirs.iter().map(|d| row_from_dir(d)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        (&a.dataset, &a.model, &a.cells, &a.arch_source)
            .cmp(&(&b.dataset, &b.model, &b.cells, &b.arch_source))
    });
    Ok(ExperimentReport {
        rows,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        generated_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

fn metric_cell(value: Option<f64>, pending: bool) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None if pending => "pending".to_string(),
        None => "-".to_string(),
    }
}

/// Machine-readable rendering: one header line, tab-separated columns.
pub fn render_tsv(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "Dataset\tEmbedding\tModel\tRNN\tSource\tTrials\tFailed\tDev\tTest\tHPT s\tTied\tRun dir\n",
    );
    for row in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}\t{}\t{}\n",
            row.dataset,
            row.embedding,
            row.model,
            row.cells,
            row.arch_source.as_deref().unwrap_or("-"),
            row.trials,
            row.failed,
            metric_cell(row.dev, row.pending),
            metric_cell(row.test, row.pending),
            row.hpt_seconds,
            if row.tied { "yes" } else { "no" },
            row.run_dir.display(),
        ));
    }
    out
}

/// Human rendering: aligned columns, dev and test performance side by side.
pub fn render_table(report: &ExperimentReport) -> String {
    let headers = ["Dataset", "Embedding", "Model", "RNN", "Source", "Trials", "Dev", "Test", "HPT s"];
    let mut cells: Vec<[String; 9]> = Vec::with_capacity(report.rows.len());
    for row in &report.rows {
        cells.push([
            row.dataset.clone(),
            row.embedding.clone(),
            row.model.clone(),
            if row.tied { format!("{} *", row.cells) } else { row.cells.clone() },
            row.arch_source.as_deref().unwrap_or("-").to_string(),
            row.trials.to_string(),
            metric_cell(row.dev, row.pending),
            metric_cell(row.test, row.pending),
            format!("{:.1}", row.hpt_seconds),
        ]);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_line = |fields: &[String], widths: &[usize]| -> String {
        let mut line = String::new();
        for (i, (field, width)) in fields.iter().zip(widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{field:<width$}"));
        }
        line.trim_end().to_string()
    };
    out.push_str(&fmt_line(
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
        &widths,
    ));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &cells {
        out.push_str(&fmt_line(row, &widths));
        out.push('\n');
    }
    if report.rows.iter().any(|r| r.tied) {
        out.push_str("* dev metric tied with other trials; earliest trial kept\n");
    }
    out
}
