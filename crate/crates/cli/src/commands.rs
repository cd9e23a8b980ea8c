//! The experiment commands: tuning studies over layer plans, the
//! architecture search, random and transfer baselines, and table export.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cellsearch_core::cell::{export_table, parse_arch_file, CellArchitecture};
use cellsearch_core::data::MetricReport;
use cellsearch_core::hpt::{
    best_trial, run_study, Assignment, ParamValue, StudyConfig, Trial, TrialStatus,
};
use cellsearch_core::nas::{
    self, derive_architectures, search_epoch, SearchConfig, SearchEpochRecord, SearchState,
    TrainSettings,
};

use crate::config::{template_spec, tuning_space, DatasetSplits, ExperimentConfig, LayerPlan};
use crate::rundir::{RunConfig, RunDir};

// ---- study commands ----

/// Best-trial record written to `best.json`: the assignment, its dev and
/// test reports, and enough labels to render a report row without rereading
/// the study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestTrial {
    pub trial_id: usize,
    pub assignment: Assignment,
    pub dev: MetricReport,
    pub test: MetricReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Other trial ids whose dev metric ties the winner exactly.
    pub tied_with: Vec<usize>,
}

/// Outcome of one tuning study.
#[derive(Debug, Clone)]
pub struct StudySummary {
    pub trials: usize,
    pub failed: usize,
    pub best: BestTrial,
    /// Total objective wall-clock across trials, from the study log.
    pub hpt_seconds: f64,
}

fn base_settings(config: &ExperimentConfig) -> TrainSettings {
    TrainSettings {
        max_epochs: config.budget.train_epochs,
        patience: config.budget.patience,
        eval_batch: config.budget.eval_batch,
        ..TrainSettings::default()
    }
}

/// Runs (or resumes) one tuning study in `out`, then retrains the best
/// trial's configuration to score the test set. This is the shared engine
/// behind the baseline, derived, random, and transfer commands; they differ
/// only in layer plan and architecture candidates.
fn run_tuning_study(
    config: &ExperimentConfig,
    out: &Path,
    command: &str,
    plan: &LayerPlan,
    arch_options: Option<Vec<String>>,
    arch_source: Option<String>,
    n_trials: usize,
) -> Result<StudySummary> {
    let run = RunDir::open(
        out,
        &RunConfig {
            command: command.to_string(),
            plan: plan.notation(),
            arch_source,
            experiment: config.clone(),
        },
    )?;
    let splits = config.dataset.load()?;
    let provider = config.embedding.provider()?;
    let template = template_spec(config, plan)?;
    let space = tuning_space(config, arch_options)?;
    let base = base_settings(config);

    let study = StudyConfig {
        log_path: Some(run.study_log()),
        resume: true,
        concurrency: config.budget.concurrency,
        mode: config.budget.sampler,
        ..StudyConfig::new(n_trials, config.budget.sampler, config.seed)
    };
    let objective = |_trial: usize, assignment: &Assignment| {
        let settings = nas::settings_from_assignment(&base, assignment)?;
        let spec = nas::spec_from_assignment(&template, assignment)?;
        let (_, _, outcome) =
            nas::train_fixed(&spec, &provider, &splits.train, &splits.dev, None, &settings)?;
        Ok(outcome.dev.primary)
    };
    let trials = run_study(&space, &study, objective)?;
    let summary = finish_study(config, &run, &template, &splits, &trials)?;
    Ok(summary)
}

/// Picks the best trial, retrains it with test scoring, and writes
/// `best.json`.
fn finish_study(
    config: &ExperimentConfig,
    run: &RunDir,
    template: &cellsearch_core::models::ModelSpec,
    splits: &DatasetSplits,
    trials: &[Trial],
) -> Result<StudySummary> {
    let provider = config.embedding.provider()?;
    let base = base_settings(config);
    let winner = best_trial(trials).context("study finished with no successful trials")?;
    let tied_with: Vec<usize> = trials
        .iter()
        .filter(|t| {
            t.id != winner.id
                && t.status == TrialStatus::Done
                && t.objective == winner.objective
        })
        .map(|t| t.id)
        .collect();

    let settings = nas::settings_from_assignment(&base, &winner.params)?;
    let spec = nas::spec_from_assignment(template, &winner.params)?;
    let (_, _, outcome) = nas::train_fixed(
        &spec,
        &provider,
        &splits.train,
        &splits.dev,
        Some(&splits.test),
        &settings,
    )?;
    let best = BestTrial {
        trial_id: winner.id,
        assignment: winner.params.clone(),
        dev: outcome.dev,
        test: outcome.test.expect("test split was provided"),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        tied_with,
    };
    std::fs::write(run.best_file(), serde_json::to_string_pretty(&best)?)?;
    Ok(StudySummary {
        trials: trials.len(),
        failed: trials
            .iter()
            .filter(|t| matches!(t.status, TrialStatus::Failed(_)))
            .count(),
        best,
        hpt_seconds: trials.iter().map(|t| t.seconds).sum(),
    })
}

/// Tunes the all-LSTM model over the standard space (no architecture row).
pub fn cmd_tune_baseline(config: &ExperimentConfig, out: &Path) -> Result<StudySummary> {
    run_tuning_study(
        config,
        out,
        "tune-baseline",
        &LayerPlan::baseline(config.model.kind),
        None,
        None,
        config.budget.baseline_trials,
    )
}

/// Reads candidate genotypes for a study: unique, in file order.
fn arch_options_from_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading architectures from {}", path.display()))?;
    let archs = parse_arch_file(&text)?;
    if archs.is_empty() {
        bail!("{} contains no architectures", path.display());
    }
    let mut options = Vec::new();
    for arch in &archs {
        let s = arch.serialize();
        if !options.contains(&s) {
            options.push(s);
        }
    }
    Ok(options)
}

/// Tunes a plan with searched layers over the standard space extended by a
/// categorical over the candidate genotypes. Every plan for the same file
/// shares that same categorical.
pub fn cmd_tune_derived(
    config: &ExperimentConfig,
    out: &Path,
    arch_file: &Path,
    plan: &LayerPlan,
) -> Result<StudySummary> {
    plan.validate_for(config.model.kind)?;
    if !plan.has_genotype_layer() {
        bail!(
            "plan {} has no searched layer; use tune-baseline for all-LSTM models",
            plan.notation()
        );
    }
    let options = arch_options_from_file(arch_file)?;
    run_tuning_study(
        config,
        out,
        "tune-derived",
        plan,
        Some(options),
        None,
        config.budget.derived_trials,
    )
}

/// Samples `count` unique genotypes uniformly. The stream depends only on
/// `seed`, so distinct datasets given the same seed reuse one candidate set.
pub fn sample_random_archs(count: usize, seed: u64) -> Result<Vec<CellArchitecture>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archs: Vec<CellArchitecture> = Vec::with_capacity(count);
    for _ in 0..count.saturating_mul(1000).max(1000) {
        if archs.len() == count {
            break;
        }
        let candidate = CellArchitecture::sample_uniform(&mut rng);
        if archs.iter().all(|a| a.serialize() != candidate.serialize()) {
            archs.push(candidate);
        }
    }
    if archs.len() < count {
        bail!("could not sample {count} unique architectures");
    }
    Ok(archs)
}

/// The random-architecture control: sample `count` uniform genotypes, then
/// run exactly the derived-tuning protocol with them.
pub fn cmd_random_baseline(
    config: &ExperimentConfig,
    out: &Path,
    count: usize,
    arch_seed: u64,
    plan: &LayerPlan,
) -> Result<StudySummary> {
    let plan = plan.randomized();
    plan.validate_for(config.model.kind)?;
    if !plan.has_genotype_layer() {
        bail!("plan {} has no layer for the sampled cells", plan.notation());
    }
    let archs = sample_random_archs(count, arch_seed)?;
    let options: Vec<String> = archs.iter().map(|a| a.serialize()).collect();

    let run = RunDir::open(
        out,
        &RunConfig {
            command: "random-baseline".to_string(),
            plan: plan.notation(),
            arch_source: Some("random".to_string()),
            experiment: config.clone(),
        },
    )?;
    std::fs::write(run.arch_file(), options.join("\n") + "\n")?;

    let splits = config.dataset.load()?;
    let provider = config.embedding.provider()?;
    let template = template_spec(config, &plan)?;
    let space = tuning_space(config, Some(options))?;
    let base = base_settings(config);
    let study = StudyConfig {
        log_path: Some(run.study_log()),
        resume: true,
        concurrency: config.budget.concurrency,
        mode: config.budget.sampler,
        ..StudyConfig::new(config.budget.derived_trials, config.budget.sampler, config.seed)
    };
    let objective = |_trial: usize, assignment: &Assignment| {
        let settings = nas::settings_from_assignment(&base, assignment)?;
        let spec = nas::spec_from_assignment(&template, assignment)?;
        let (_, _, outcome) =
            nas::train_fixed(&spec, &provider, &splits.train, &splits.dev, None, &settings)?;
        Ok(outcome.dev.primary)
    };
    let trials = run_study(&space, &study, objective)?;
    finish_study(config, &run, &template, &splits, &trials)
}

/// Tunes this dataset with genotypes searched on a *different* dataset.
/// Same-dataset transfer is refused, as is any source on the block list
/// (for corpora whose data overlaps the target's).
pub fn cmd_transfer(
    config: &ExperimentConfig,
    out: &Path,
    source_arch_file: &Path,
    source_dataset: &str,
    blocked: &[String],
    plan: &LayerPlan,
) -> Result<StudySummary> {
    if source_dataset == config.dataset.name() {
        bail!(
            "transfer from {source_dataset:?} onto itself is not a transfer; \
             run tune-derived instead"
        );
    }
    if blocked.iter().any(|b| b == source_dataset) {
        bail!("transfer from {source_dataset:?} is blocked for this target");
    }
    plan.validate_for(config.model.kind)?;
    if !plan.has_genotype_layer() {
        bail!("plan {} has no searched layer to transfer into", plan.notation());
    }
    let options = arch_options_from_file(source_arch_file)?;
    run_tuning_study(
        config,
        out,
        "transfer",
        plan,
        Some(options),
        Some(source_dataset.to_string()),
        config.budget.derived_trials,
    )
}

// ---- the search command ----

/// Child hyperparameters for the shared model during search, normally taken
/// from a completed baseline study's best trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChildHparams {
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub dropout: (f64, f64),
    pub variational_dropout: f64,
    pub weight_decay: f64,
}

impl ChildHparams {
    /// Reads the best baseline trial's assignment out of a run directory.
    pub fn from_baseline(dir: &Path, layers: usize) -> Result<Self> {
        let (run, run_config) = RunDir::read(dir)?;
        if run_config.command != "tune-baseline" {
            bail!("{} holds a {} run, not a baseline study", dir.display(), run_config.command);
        }
        let best: BestTrial = serde_json::from_str(
            &std::fs::read_to_string(run.best_file())
                .with_context(|| format!("{} has no completed study (missing best.json)", dir.display()))?,
        )?;
        let a = &best.assignment;
        let number = |name: &str| cellsearch_core::hpt::number_of(a, name).map_err(anyhow::Error::from);
        let mut hidden = Vec::with_capacity(layers);
        for layer in 0..layers {
            hidden.push(cellsearch_core::hpt::usize_of(a, &format!("hidden_dim_{layer}"))?);
        }
        Ok(ChildHparams {
            batch_size: cellsearch_core::hpt::usize_of(a, "batch_size")?,
            hidden,
            dropout: (number("dropout_1")?, number("dropout_2")?),
            variational_dropout: number("variational_dropout")?,
            weight_decay: number("weight_decay")?,
        })
    }
}

/// Outcome of the search command.
#[derive(Debug)]
pub struct SearchSummary {
    pub derived: Vec<CellArchitecture>,
    pub history: Vec<SearchEpochRecord>,
    pub warning: Option<String>,
    /// True when the derived file already existed and nothing ran.
    pub already_complete: bool,
}

/// Runs the weight-sharing search: every layer searched, child trained with
/// the search-phase constants (learning rate 1e-4, clip 0.25), controller
/// rewarded on dev. The child's batch size, hidden sizes, dropouts, and
/// weight decay come from the best baseline trial or explicit overrides.
/// The search checkpoints after every epoch and resumes from `search.json`.
pub fn cmd_search(
    config: &ExperimentConfig,
    out: &Path,
    child: ChildHparams,
) -> Result<SearchSummary> {
    let plan = LayerPlan::searched(config.model.kind);
    let run = RunDir::open(
        out,
        &RunConfig {
            command: "search".to_string(),
            plan: plan.notation(),
            arch_source: None,
            experiment: config.clone(),
        },
    )?;
    if run.arch_file().exists() {
        let derived = parse_arch_file(&std::fs::read_to_string(run.arch_file())?)?;
        let history: Vec<SearchEpochRecord> =
            serde_json::from_str(&std::fs::read_to_string(run.history_file())?)?;
        return Ok(SearchSummary {
            derived,
            history,
            warning: None,
            already_complete: true,
        });
    }

    let splits = config.dataset.load()?;
    let provider = config.embedding.provider()?;
    let mut spec = template_spec(config, &plan)?;
    if child.hidden.len() != spec.hidden.len() {
        bail!(
            "child hyperparameters carry {} hidden sizes, model has {} layers",
            child.hidden.len(),
            spec.hidden.len()
        );
    }
    spec.hidden = child.hidden.clone();
    spec.dropout = child.dropout;
    spec.variational_dropout = child.variational_dropout;

    let search_config = SearchConfig {
        max_epochs: config.budget.search_epochs,
        patience: config.budget.patience,
        child_weight_decay: child.weight_decay,
        batch_size: child.batch_size,
        reward_subset: config.budget.reward_subset,
        seed: config.seed,
        ..SearchConfig::default()
    };
    let derive_count = search_config.derive_count;
    let mut state = if run.checkpoint_file().exists() {
        SearchState::load_checkpoint(&run.checkpoint_file())?
    } else {
        SearchState::new(search_config, spec, &provider)?
    };
    while !state.should_stop() {
        search_epoch(&mut state, &provider, &splits.train, &splits.dev)?;
        state.save_checkpoint(&run.checkpoint_file())?;
    }
    let (derived, warning) = derive_architectures(&state, derive_count)?;

    let lines: Vec<String> = derived.iter().map(|a| a.serialize()).collect();
    std::fs::write(run.arch_file(), lines.join("\n") + "\n")?;
    std::fs::write(run.history_file(), serde_json::to_string_pretty(&state.history)?)?;
    Ok(SearchSummary {
        derived,
        history: state.history,
        warning,
        already_complete: false,
    })
}

// ---- table export ----

/// Renders an architecture file in the reporting column layout.
pub fn cmd_export_arch_table(arch_file: &Path) -> Result<String> {
    let text = std::fs::read_to_string(arch_file)
        .with_context(|| format!("reading architectures from {}", arch_file.display()))?;
    let archs = parse_arch_file(&text)?;
    if archs.is_empty() {
        bail!("{} contains no architectures", arch_file.display());
    }
    Ok(export_table(&archs))
}

/// The assignment's genotype, when the study had an architecture row.
pub fn assignment_arch(assignment: &Assignment) -> Option<&str> {
    match assignment.get("arch") {
        Some(ParamValue::Text(s)) => Some(s),
        _ => None,
    }
}
