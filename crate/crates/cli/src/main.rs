//! `cellsearch` — tuning studies, weight-sharing architecture search,
//! random/transfer baselines, and experiment reports.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cellsearch_cli::commands::{
    self, ChildHparams, SearchSummary, StudySummary,
};
use cellsearch_cli::config::{Budget, ExperimentConfig, LayerPlan};
use cellsearch_cli::report::{assemble_report, render_table, render_tsv};
use cellsearch_core::hpt::StudyMode;

#[derive(Parser)]
#[command(
    name = "cellsearch",
    about = "Recurrent-cell architecture search and tuning experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Workstation scale: 20 trials, 10 search epochs.
    Desk,
    /// Full protocol scale: 500/200 trials, 150 search epochs.
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Tpe,
    Random,
}

/// Flags every study/search command accepts; each overrides the
/// corresponding config-file field.
#[derive(Args)]
struct Overrides {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory for logs and artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Replace the whole budget block with a named preset.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trial count for this study (overrides both budget trial fields).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long, value_enum)]
    sampler: Option<Sampler>,
    /// Shrink batch/hidden choices to fit constrained memory.
    #[arg(long)]
    memory_cap: bool,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(preset) = self.preset {
            config.budget = match preset {
                Preset::Desk => Budget::desk(),
                Preset::Full => Budget::full(),
            };
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(trials) = self.trials {
            config.budget.baseline_trials = trials;
            config.budget.derived_trials = trials;
        }
        if let Some(concurrency) = self.concurrency {
            config.budget.concurrency = concurrency;
        }
        if let Some(sampler) = self.sampler {
            config.budget.sampler = match sampler {
                Sampler::Tpe => StudyMode::Tpe,
                Sampler::Random => StudyMode::Random,
            };
        }
        if self.memory_cap {
            config.budget.memory_cap = true;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Tune the all-LSTM model over the standard hyperparameter space.
    TuneBaseline {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the weight-sharing search and derive candidate genotypes.
    Search {
        #[command(flatten)]
        overrides: Overrides,
        /// Completed tune-baseline run directory supplying the child
        /// hyperparameters.
        #[arg(long, conflicts_with = "child_json")]
        baseline: Option<PathBuf>,
        /// Explicit child hyperparameters as JSON
        /// (batch_size/hidden/dropout/variational_dropout/weight_decay).
        #[arg(long)]
        child_json: Option<String>,
        /// Search epochs (overrides the budget).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tune a plan with searched layers over candidate genotypes.
    TuneDerived {
        #[command(flatten)]
        overrides: Overrides,
        /// Architecture file, one genotype per line.
        #[arg(long)]
        archs: PathBuf,
        /// Per-layer cell plan, e.g. "E", "E/L", "L/E", "E/E".
        #[arg(long)]
        plan: String,
    },
    /// Sample uniform genotypes and run the derived-tuning protocol on them.
    RandomBaseline {
        #[command(flatten)]
        overrides: Overrides,
        /// How many genotypes to sample.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Seed for the sampled set; share it across datasets to reuse one
        /// candidate set (defaults to the experiment seed).
        #[arg(long)]
        arch_seed: Option<u64>,
        /// Per-layer plan; searched slots receive the sampled cells.
        #[arg(long)]
        plan: Option<String>,
    },
    /// Tune this dataset with genotypes searched on a different dataset.
    Transfer {
        #[command(flatten)]
        overrides: Overrides,
        /// Architecture file from the source dataset's search.
        #[arg(long)]
        archs: PathBuf,
        /// Name of the dataset the architectures came from.
        #[arg(long)]
        source: String,
        /// Source dataset names to refuse (overlapping corpora).
        #[arg(long)]
        block: Vec<String>,
        #[arg(long)]
        plan: Option<String>,
    },
    /// Assemble the experiment table from run directories.
    Report {
        /// Run directories to include.
        dirs: Vec<PathBuf>,
        /// Also write the machine-readable table here.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Render an architecture file in the reporting column layout.
    ExportArchTable {
        /// Architecture file, one genotype per line.
        archs: PathBuf,
    },
}

fn print_study(label: &str, summary: &StudySummary) {
    let best = &summary.best;
    println!(
        "{label}: {} trials ({} failed), best trial {} dev {:.4} test {:.4} ({} epochs, best at {})",
        summary.trials,
        summary.failed,
        best.trial_id,
        best.dev.primary,
        best.test.primary,
        best.epochs_run,
        best.best_epoch,
    );
    if let Some(arch) = commands::assignment_arch(&best.assignment) {
        println!("  genotype: {arch}");
    }
    if !best.tied_with.is_empty() {
        println!("  note: dev metric tied with trials {:?}", best.tied_with);
    }
}

fn print_search(summary: &SearchSummary) {
    if summary.already_complete {
        println!("search already complete; reusing derived architectures");
    }
    for record in &summary.history {
        println!(
            "epoch {:>3}: child loss {:.4}, reward {:.4}, baseline {:.4}",
            record.epoch, record.train_loss, record.mean_reward, record.baseline
        );
    }
    println!("derived {} architectures:", summary.derived.len());
    for arch in &summary.derived {
        println!("  {}", arch.serialize());
    }
    if let Some(warning) = &summary.warning {
        println!("warning: {warning}");
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TuneBaseline { overrides } => {
            let config = overrides.load()?;
            let summary = commands::cmd_tune_baseline(&config, &overrides.out)?;
            print_study("baseline study", &summary);
        }
        Command::Search {
            overrides,
            baseline,
            child_json,
            epochs,
        } => {
            let mut config = overrides.load()?;
            if let Some(epochs) = epochs {
                config.budget.search_epochs = epochs;
            }
            let layers = config.model.kind.layer_count();
            let child = match (baseline, child_json) {
                (Some(dir), None) => ChildHparams::from_baseline(&dir, layers)?,
                (None, Some(json)) => serde_json::from_str(&json)?,
                (None, None) => bail!(
                    "search needs --baseline <completed tune-baseline dir> or --child-json"
                ),
                (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
            };
            let summary = commands::cmd_search(&config, &overrides.out, child)?;
            print_search(&summary);
        }
        Command::TuneDerived {
            overrides,
            archs,
            plan,
        } => {
            let config = overrides.load()?;
            let plan = LayerPlan::parse(&plan)?;
            let summary = commands::cmd_tune_derived(&config, &overrides.out, &archs, &plan)?;
            print_study(&format!("derived study [{}]", plan.notation()), &summary);
        }
        Command::RandomBaseline {
            overrides,
            count,
            arch_seed,
            plan,
        } => {
            let config = overrides.load()?;
            let plan = match plan {
                Some(p) => LayerPlan::parse(&p)?,
                None => LayerPlan::searched(config.model.kind),
            };
            let seed = arch_seed.unwrap_or(config.seed);
            let summary =
                commands::cmd_random_baseline(&config, &overrides.out, count, seed, &plan)?;
            print_study("random-cell study", &summary);
        }
        Command::Transfer {
            overrides,
            archs,
            source,
            block,
            plan,
        } => {
            let config = overrides.load()?;
            let plan = match plan {
                Some(p) => LayerPlan::parse(&p)?,
                None => LayerPlan::searched(config.model.kind),
            };
            let summary =
                commands::cmd_transfer(&config, &overrides.out, &archs, &source, &block, &plan)?;
            print_study(&format!("transfer study [{source}]"), &summary);
        }
        Command::Report { dirs, tsv } => {
            if dirs.is_empty() {
                bail!("report needs at least one run directory");
            }
            let report = assemble_report(&dirs)?;
            if let Some(path) = tsv {
                std::fs::write(&path, render_tsv(&report))?;
                println!("wrote {}", path.display());
            }
            print!("{}", render_table(&report));
        }
        Command::ExportArchTable { archs } => {
            print!("{}", commands::cmd_export_arch_table(&archs)?);
        }
    }
    Ok(())
}
