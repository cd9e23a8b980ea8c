//! End-to-end runs of the experiment commands on tiny synthetic
//! configurations: run-directory artifacts, idempotent reruns, resumable
//! search, and report assembly.

use std::path::{Path, PathBuf};

use cellsearch_cli::commands::{
    assignment_arch, cmd_export_arch_table, cmd_random_baseline, cmd_search, cmd_transfer,
    cmd_tune_baseline, cmd_tune_derived, ChildHparams,
};
use cellsearch_cli::config::{
    Budget, DatasetSource, EmbeddingSpec, ExperimentConfig, LayerPlan,
};
use cellsearch_cli::report::{assemble_report, render_table, render_tsv};
use cellsearch_cli::rundir::{RunConfig, RunDir};
use cellsearch_core::cell::parse_arch_file;
use cellsearch_core::data::TaskKind;
use cellsearch_core::hpt::{load_study_log, StudyMode};
use cellsearch_core::models::ModelKind;

const FIXTURE_CELLS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference_cells.txt");

/// Fresh scratch directory for one test, cleared from any earlier run.
fn test_root(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("cellsearch-pipeline")
        .join(format!("{name}-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A config small enough that a full study runs in seconds.
fn tiny_config(task: TaskKind, model: ModelKind, seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::synthetic(task, model, seed);
    config.dataset.source = DatasetSource::Synthetic { task, n: 64, seed };
    config.embedding = EmbeddingSpec::ToyHash { dim: 8 };
    config.model.hidden_choices = vec![8];
    config.budget = Budget {
        baseline_trials: 4,
        derived_trials: 4,
        concurrency: 1,
        search_epochs: 2,
        train_epochs: 2,
        patience: 2,
        eval_batch: 32,
        reward_subset: Some(16),
        sampler: StudyMode::Random,
        memory_cap: false,
    };
    config
}

/// First `n` genotype lines of the reference file, written to `path`.
fn write_fixture_subset(path: &Path, n: usize) {
    let text = std::fs::read_to_string(FIXTURE_CELLS).unwrap();
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .take(n)
        .collect();
    assert_eq!(lines.len(), n);
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn baseline_study_completes_and_reruns_are_idempotent() {
    let root = test_root("baseline");
    let config = tiny_config(TaskKind::Classification, ModelKind::Blm, 5);
    let out = root.join("blm-lstm");

    let first = cmd_tune_baseline(&config, &out).unwrap();
    assert_eq!(first.trials, 4);
    assert!(out.join("best.json").exists());
    assert!((0.0..=1.0).contains(&first.best.dev.primary));
    assert!((0.0..=1.0).contains(&first.best.test.primary));

    // Rerunning resumes from the log: no new trials, same winner.
    let second = cmd_tune_baseline(&config, &out).unwrap();
    assert_eq!(second.trials, first.trials);
    assert_eq!(second.best.trial_id, first.best.trial_id);
    assert_eq!(second.best.dev.primary.to_bits(), first.best.dev.primary.to_bits());
    assert_eq!(load_study_log(&out.join("study.jsonl")).unwrap().len(), 4);

    // A different experiment may not reuse the directory.
    let other = tiny_config(TaskKind::Classification, ModelKind::Blm, 6);
    let err = cmd_tune_baseline(&other, &out).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{err}");
}

#[test]
fn identical_studies_in_fresh_directories_agree_trial_for_trial() {
    let root = test_root("repro");
    let config = tiny_config(TaskKind::Regression, ModelKind::Blm, 9);

    let a = cmd_tune_baseline(&config, &root.join("a")).unwrap();
    let b = cmd_tune_baseline(&config, &root.join("b")).unwrap();
    assert_eq!(a.best.trial_id, b.best.trial_id);
    assert_eq!(a.best.dev.primary.to_bits(), b.best.dev.primary.to_bits());
    assert_eq!(a.best.test.primary.to_bits(), b.best.test.primary.to_bits());

    let log_a = load_study_log(&root.join("a/study.jsonl")).unwrap();
    let log_b = load_study_log(&root.join("b/study.jsonl")).unwrap();
    assert_eq!(log_a.len(), log_b.len());
    for (ta, tb) in log_a.iter().zip(&log_b) {
        // Everything but wall-clock must match bit-for-bit.
        assert_eq!(ta.id, tb.id);
        assert_eq!(ta.objective, tb.objective);
        assert_eq!(
            serde_json::to_string(&ta.params).unwrap(),
            serde_json::to_string(&tb.params).unwrap()
        );
    }
}

#[test]
fn search_feeds_on_baseline_hparams_and_resumes_complete() {
    let root = test_root("search");
    let config = tiny_config(TaskKind::Classification, ModelKind::Blm, 11);

    let baseline_dir = root.join("baseline");
    cmd_tune_baseline(&config, &baseline_dir).unwrap();
    let child = ChildHparams::from_baseline(&baseline_dir, config.model.kind.layer_count()).unwrap();
    assert_eq!(child.hidden, vec![8]);

    let search_dir = root.join("search");
    let summary = cmd_search(&config, &search_dir, child.clone()).unwrap();
    assert!(!summary.already_complete);
    assert_eq!(summary.history.len(), config.budget.search_epochs);
    assert_eq!(summary.derived.len(), 10);

    // The architecture file round-trips and is duplicate-free.
    let parsed = parse_arch_file(&std::fs::read_to_string(search_dir.join("architectures.txt")).unwrap()).unwrap();
    let lines: Vec<String> = parsed.iter().map(|a| a.serialize()).collect();
    let expected: Vec<String> = summary.derived.iter().map(|a| a.serialize()).collect();
    assert_eq!(lines, expected);
    let mut unique = lines.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), lines.len());

    // A second invocation sees the finished run and changes nothing.
    let again = cmd_search(&config, &search_dir, child).unwrap();
    assert!(again.already_complete);
    assert_eq!(
        again.derived.iter().map(|a| a.serialize()).collect::<Vec<_>>(),
        expected
    );
    assert_eq!(again.history.len(), summary.history.len());
}

#[test]
fn derived_study_tunes_over_the_candidate_genotypes() {
    let root = test_root("derived");
    let config = tiny_config(TaskKind::Classification, ModelKind::Blm, 13);
    let archs = root.join("candidates.txt");
    write_fixture_subset(&archs, 3);
    let options: Vec<String> = parse_arch_file(&std::fs::read_to_string(&archs).unwrap())
        .unwrap()
        .iter()
        .map(|a| a.serialize())
        .collect();

    let plan = LayerPlan::parse("E").unwrap();
    let summary = cmd_tune_derived(&config, &root.join("study"), &archs, &plan).unwrap();
    assert_eq!(summary.trials, 4);
    let winner = assignment_arch(&summary.best.assignment).unwrap().to_string();
    assert!(options.contains(&winner), "{winner} not among the candidates");

    for trial in load_study_log(&root.join("study/study.jsonl")).unwrap() {
        let arch = assignment_arch(&trial.params).unwrap().to_string();
        assert!(options.contains(&arch));
    }
}

#[test]
fn mixed_esim_plan_puts_the_genotype_in_the_first_layer_only() {
    let root = test_root("esim-mixed");
    let mut config = tiny_config(TaskKind::Classification, ModelKind::Esim, 17);
    config.dataset.source = DatasetSource::Synthetic {
        task: TaskKind::Classification,
        n: 40,
        seed: 17,
    };
    config.budget.derived_trials = 2;
    let archs = root.join("candidates.txt");
    write_fixture_subset(&archs, 2);

    let plan = LayerPlan::parse("E / L").unwrap();
    assert_eq!(plan.notation(), "E / L");
    let summary = cmd_tune_derived(&config, &root.join("study"), &archs, &plan).unwrap();
    assert_eq!(summary.trials, 2);
    assert!(assignment_arch(&summary.best.assignment).is_some());

    let (_, run_config) = RunDir::read(&root.join("study")).unwrap();
    assert_eq!(run_config.plan, "E / L");
}

#[test]
fn random_baseline_reuses_one_candidate_set_across_datasets() {
    let root = test_root("random");
    let para = tiny_config(TaskKind::Classification, ModelKind::Blm, 19);
    let sim = tiny_config(TaskKind::Regression, ModelKind::Blm, 19);
    let plan = LayerPlan::searched(ModelKind::Blm);

    let a = cmd_random_baseline(&para, &root.join("para"), 5, 123, &plan).unwrap();
    let b = cmd_random_baseline(&sim, &root.join("sim"), 5, 123, &plan).unwrap();
    assert_eq!(a.trials, 4);
    assert_eq!(b.trials, 4);

    // Same arch seed, same candidates, regardless of the dataset.
    let cells_a = std::fs::read_to_string(root.join("para/architectures.txt")).unwrap();
    let cells_b = std::fs::read_to_string(root.join("sim/architectures.txt")).unwrap();
    assert_eq!(cells_a, cells_b);
    assert_eq!(parse_arch_file(&cells_a).unwrap().len(), 5);

    let (_, run_config) = RunDir::read(&root.join("para")).unwrap();
    assert_eq!(run_config.plan, "RND");
    assert_eq!(run_config.arch_source.as_deref(), Some("random"));
}

#[test]
fn transfer_refuses_bad_sources_and_labels_good_ones() {
    let root = test_root("transfer");
    let config = tiny_config(TaskKind::Regression, ModelKind::Blm, 23);
    let archs = root.join("candidates.txt");
    write_fixture_subset(&archs, 3);
    let plan = LayerPlan::searched(ModelKind::Blm);

    let err = cmd_transfer(&config, &root.join("x"), &archs, "synthetic-similarity", &[], &plan)
        .unwrap_err();
    assert!(err.to_string().contains("itself"), "{err}");

    let blocked = vec!["synthetic-paraphrase".to_string()];
    let err = cmd_transfer(&config, &root.join("x"), &archs, "synthetic-paraphrase", &blocked, &plan)
        .unwrap_err();
    assert!(err.to_string().contains("blocked"), "{err}");

    let summary =
        cmd_transfer(&config, &root.join("ok"), &archs, "synthetic-paraphrase", &[], &plan).unwrap();
    assert_eq!(summary.trials, 4);
    let (_, run_config) = RunDir::read(&root.join("ok")).unwrap();
    assert_eq!(run_config.arch_source.as_deref(), Some("synthetic-paraphrase"));
}

#[test]
fn report_orders_rows_and_marks_unfinished_studies_pending() {
    let root = test_root("report");
    let done = tiny_config(TaskKind::Classification, ModelKind::Blm, 29);
    cmd_tune_baseline(&done, &root.join("done")).unwrap();

    // A directory with only a config snapshot: the study has not run yet.
    let waiting = tiny_config(TaskKind::Regression, ModelKind::Blm, 29);
    RunDir::open(
        &root.join("waiting"),
        &RunConfig {
            command: "tune-baseline".to_string(),
            plan: "L".to_string(),
            arch_source: None,
            experiment: waiting,
        },
    )
    .unwrap();

    let report = assemble_report(&[root.join("waiting"), root.join("done")]).unwrap();
    assert_eq!(report.rows.len(), 2);
    // Sorted by dataset name: paraphrase before similarity.
    assert_eq!(report.rows[0].dataset, "synthetic-paraphrase");
    assert!(!report.rows[0].pending);
    assert!(report.rows[0].dev.is_some());
    assert!(report.rows[0].test.is_some());
    assert_eq!(report.rows[1].dataset, "synthetic-similarity");
    assert!(report.rows[1].pending);
    assert_eq!(report.rows[1].dev, None);

    let table = render_table(&report);
    assert!(table.contains("pending"), "{table}");
    assert!(table.contains("BLM"), "{table}");

    let tsv = render_tsv(&report);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("Dataset\tEmbedding\tModel"));
}

#[test]
fn arch_table_export_covers_every_reference_cell() {
    let table = cmd_export_arch_table(Path::new(FIXTURE_CELLS)).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 27, "header plus 26 genotypes");
    assert!(lines[0].starts_with("Arch\tNode 0 Op"));
    assert!(lines[1].starts_with("1\t"));
    assert!(lines[26].starts_with("26\t"));
}
