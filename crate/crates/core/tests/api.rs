//! Consumer-view checks: the tuning, training, and search entry points have
//! to compose into a working experiment through the public API alone, the
//! way the command-line crate (or any other caller) assembles them.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cellsearch_core::cell::CellArchitecture;
use cellsearch_core::data::{make_synthetic, EmbeddingProvider, TaskKind};
use cellsearch_core::hpt::{
    best_trial, load_study_log, model_tuning_space, run_study, StudyConfig, StudyMode, Trial,
    TrialStatus,
};
use cellsearch_core::models::{CellKind, ModelKind, ModelSpec};
use cellsearch_core::nas::{
    run_search, settings_from_assignment, spec_from_assignment, train_fixed, SearchConfig,
    TrainSettings,
};
use cellsearch_core::Result;

fn provider() -> EmbeddingProvider {
    EmbeddingProvider::ToyHash { dim: 8 }
}

fn blm_template(task: TaskKind, cell: CellKind) -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Blm,
        cells: vec![cell],
        hidden: vec![8],
        task,
        dropout: (0.0, 0.0),
        variational_dropout: 0.0,
        highway: true,
        ff_hidden: None,
        clamp_predictions: false,
    }
}

fn short_budget() -> TrainSettings {
    TrainSettings {
        max_epochs: 2,
        patience: 2,
        eval_batch: 32,
        ..TrainSettings::default()
    }
}

fn run_tiny_study(seed: u64, n_trials: usize, config: Option<StudyConfig>) -> Result<Vec<Trial>> {
    let data = make_synthetic(TaskKind::Classification, 48, 9)?;
    let (train, dev) = data.split(0.25, 9)?;
    let provider = provider();
    let template = blm_template(TaskKind::Classification, CellKind::Lstm);
    let space = model_tuning_space(TaskKind::Classification, &[8.0], 1, None)?;
    let config = config.unwrap_or_else(|| StudyConfig::new(n_trials, StudyMode::Random, seed));
    run_study(&space, &config, |_, assignment| {
        let spec = spec_from_assignment(&template, assignment)?;
        let settings = settings_from_assignment(&short_budget(), assignment)?;
        let (_, _, outcome) = train_fixed(&spec, &provider, &train, &dev, None, &settings)?;
        Ok(outcome.dev.primary)
    })
}

#[test]
fn a_study_tunes_a_model_end_to_end() {
    let trials = run_tiny_study(5, 4, None).unwrap();
    assert_eq!(trials.len(), 4);
    for trial in &trials {
        assert_eq!(trial.status, TrialStatus::Done, "trial {} failed", trial.id);
        let objective = trial.objective.expect("done trials carry an objective");
        assert!((0.0..=1.0).contains(&objective), "accuracy {objective} out of range");
    }

    // The winner is exactly the maximum the caller could recompute.
    let best = best_trial(&trials).unwrap();
    let max = trials
        .iter()
        .filter_map(|t| t.objective)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.objective.unwrap(), max);

    // Same seed, fresh study: identical suggestions and identical scores.
    let again = run_tiny_study(5, 4, None).unwrap();
    for (a, b) in trials.iter().zip(&again) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.objective, b.objective);
    }
}

#[test]
fn an_interrupted_study_resumes_from_its_log() {
    let dir = std::env::temp_dir().join(format!("cellsearch-api-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let log = dir.join("study.jsonl");

    let mut first = StudyConfig::new(2, StudyMode::Random, 5);
    first.log_path = Some(log.clone());
    let partial = run_tiny_study(5, 2, Some(first)).unwrap();
    assert_eq!(load_study_log(&log).unwrap(), partial);

    let mut rest = StudyConfig::new(4, StudyMode::Random, 5);
    rest.log_path = Some(log.clone());
    rest.resume = true;
    let resumed = run_tiny_study(5, 4, Some(rest)).unwrap();
    assert_eq!(&resumed[..2], &partial[..], "finished trials were redone");

    // Trial sampling is keyed by (study seed, trial id), so the resumed
    // study matches one that never stopped.
    let straight = run_tiny_study(5, 4, None).unwrap();
    for (a, b) in resumed.iter().zip(&straight) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.objective, b.objective);
    }

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn derived_genotypes_feed_fixed_training() {
    let data = make_synthetic(TaskKind::Regression, 48, 3).unwrap();
    let (train, dev) = data.split(0.25, 3).unwrap();
    let provider = provider();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let placeholder = CellArchitecture::sample_uniform(&mut rng);
    let spec = blm_template(TaskKind::Regression, CellKind::Enas(placeholder));

    let config = SearchConfig {
        max_epochs: 2,
        patience: 2,
        batch_size: 16,
        controller_steps: 2,
        samples_per_step: 2,
        derive_count: 3,
        reward_subset: Some(16),
        seed: 7,
        ..SearchConfig::default()
    };
    let outcome = run_search(config, spec, &provider, &train, &dev).unwrap();
    assert_eq!(outcome.state.history.len(), 2);
    assert_eq!(outcome.derived.len(), 3);
    let unique: HashSet<String> = outcome.derived.iter().map(|a| a.serialize()).collect();
    assert_eq!(unique.len(), 3);

    // Retrain the first derived cell from scratch, the way a derived study
    // would, and make sure it produces a usable report.
    let retrain = blm_template(TaskKind::Regression, CellKind::Enas(outcome.derived[0].clone()));
    let (_, _, trained) =
        train_fixed(&retrain, &provider, &train, &dev, Some(&dev), &short_budget()).unwrap();
    assert!((-1.0..=1.0).contains(&trained.dev.primary));
    let test = trained.test.expect("test split was scored");
    assert!((-1.0..=1.0).contains(&test.primary));
    assert_eq!(trained.curve.len(), trained.epochs_run);
}
