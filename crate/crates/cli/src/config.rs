//! Experiment configuration: dataset/embedding/model/budget blocks, layer
//! plans, and the tuning-space assembly shared by every study command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cellsearch_core::cell::CellArchitecture;
use cellsearch_core::data::{
    load_embeddings_text, load_multilayer_text, load_tsv, make_synthetic, EmbeddingProvider,
    LabelRange, LayerKeying, SentencePairDataset, TaskKind,
};
use cellsearch_core::hpt::{model_tuning_space, ParamDomain, SearchSpace, StudyMode};
use cellsearch_core::models::{CellKind, ModelKind, ModelSpec};

/// Where the sentence pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    /// Deterministic generated task; the desk-scale stand-in for a corpus.
    Synthetic { task: TaskKind, n: usize, seed: u64 },
    /// `sentence1<TAB>sentence2<TAB>label` file.
    File {
        path: PathBuf,
        name: String,
        task: TaskKind,
        label_range: LabelRange,
        token_cap: usize,
        has_header: bool,
    },
}

/// Dataset block: a source plus deterministic split fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DatasetSource,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

/// Train/dev/test views of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: SentencePairDataset,
    pub dev: SentencePairDataset,
    pub test: SentencePairDataset,
}

impl DatasetSpec {
    pub fn name(&self) -> &str {
        match &self.source {
            DatasetSource::Synthetic { task, .. } => match task {
                TaskKind::Classification => "synthetic-paraphrase",
                TaskKind::Regression => "synthetic-similarity",
            },
            DatasetSource::File { name, .. } => name,
        }
    }

    pub fn task(&self) -> TaskKind {
        match &self.source {
            DatasetSource::Synthetic { task, .. } => *task,
            DatasetSource::File { task, .. } => *task,
        }
    }

    /// Loads and splits the data. The test split is carved off first, then
    /// dev from the remainder, both with seeds derived from `split_seed`.
    pub fn load(&self) -> Result<DatasetSplits> {
        let full = match &self.source {
            DatasetSource::Synthetic { task, n, seed } => make_synthetic(*task, *n, *seed)?,
            DatasetSource::File {
                path,
                name,
                task,
                label_range,
                token_cap,
                has_header,
            } => load_tsv(
                path,
                &cellsearch_core::data::DatasetConfig {
                    name: name.clone(),
                    task: *task,
                    label_range: *label_range,
                    token_cap: *token_cap,
                    has_header: *has_header,
                },
            )
            .with_context(|| format!("loading dataset from {}", path.display()))?,
        };
        let (rest, test) = full.split(self.test_fraction, self.split_seed)?;
        let (train, dev) = rest.split(self.dev_fraction, self.split_seed.wrapping_add(1))?;
        Ok(DatasetSplits { train, dev, test })
    }
}

/// Token-vector source block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmbeddingSpec {
    /// Deterministic hash-derived vectors; no files needed.
    ToyHash { dim: usize },
    /// One vector per token, text format.
    Static { path: PathBuf },
    /// Frozen per-layer tables mixed by trainable softmax weights.
    MultiLayer { path: PathBuf, keying: LayerKeying },
}

impl EmbeddingSpec {
    pub fn provider(&self) -> Result<EmbeddingProvider> {
        Ok(match self {
            EmbeddingSpec::ToyHash { dim } => EmbeddingProvider::ToyHash { dim: *dim },
            EmbeddingSpec::Static { path } => EmbeddingProvider::Static(
                load_embeddings_text(path)
                    .with_context(|| format!("loading embeddings from {}", path.display()))?,
            ),
            EmbeddingSpec::MultiLayer { path, keying } => EmbeddingProvider::MultiLayer(
                load_multilayer_text(path, *keying)
                    .with_context(|| format!("loading embeddings from {}", path.display()))?,
            ),
        })
    }

    /// Short label for report rows.
    pub fn describe(&self) -> String {
        match self {
            EmbeddingSpec::ToyHash { dim } => format!("toy-hash-{dim}"),
            EmbeddingSpec::Static { path } | EmbeddingSpec::MultiLayer { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        }
    }
}

/// Model block: architecture family and the hidden sizes tuning may pick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Candidate per-layer hidden sizes for the tuning space.
    pub hidden_choices: Vec<usize>,
    pub highway: bool,
    pub clamp_predictions: bool,
    pub ff_hidden: Option<usize>,
}

/// Trial and epoch budgets. `desk` keeps everything workstation-sized;
/// `full` restores the complete protocol scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Trials for a baseline (LSTM-only) study.
    pub baseline_trials: usize,
    /// Trials for derived / random / transfer studies.
    pub derived_trials: usize,
    pub concurrency: usize,
    pub search_epochs: usize,
    /// Epoch cap when training one trial from scratch.
    pub train_epochs: usize,
    /// Early-stopping patience, for both trial training and the search.
    pub patience: usize,
    pub eval_batch: usize,
    /// Dev examples per search reward evaluation; `None` scores the full set.
    pub reward_subset: Option<usize>,
    /// Trial suggestion strategy.
    pub sampler: StudyMode,
    /// Shrink batch/hidden choices to fit constrained memory.
    pub memory_cap: bool,
}

impl Budget {
    pub fn desk() -> Self {
        Budget {
            baseline_trials: 20,
            derived_trials: 20,
            concurrency: 1,
            search_epochs: 10,
            train_epochs: 12,
            patience: 5,
            eval_batch: 64,
            reward_subset: Some(128),
            sampler: StudyMode::Tpe,
            memory_cap: false,
        }
    }

    /// Full protocol scale: 500 baseline trials, 200 derived trials,
    /// 150 search epochs.
    pub fn full() -> Self {
        Budget {
            baseline_trials: 500,
            derived_trials: 200,
            search_epochs: 150,
            train_epochs: 75,
            patience: 10,
            reward_subset: None,
            ..Budget::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline_trials == 0
            || self.derived_trials == 0
            || self.concurrency == 0
            || self.search_epochs == 0
            || self.train_epochs == 0
            || self.patience == 0
            || self.eval_batch == 0
            || self.reward_subset == Some(0)
        {
            bail!("every budget field must be positive");
        }
        Ok(())
    }
}

/// One experiment: what to train on, with what vectors, which model family,
/// and how much compute to spend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub embedding: EmbeddingSpec,
    pub model: ModelConfig,
    pub budget: Budget,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.hidden_choices.is_empty() || self.model.hidden_choices.contains(&0) {
            bail!("hidden_choices must be non-empty and positive");
        }
        self.budget.validate()
    }

    /// A ready-to-run desk-scale config on the generated tasks.
    pub fn synthetic(task: TaskKind, model: ModelKind, seed: u64) -> Self {
        ExperimentConfig {
            dataset: DatasetSpec {
                source: DatasetSource::Synthetic { task, n: 160, seed },
                dev_fraction: 0.2,
                test_fraction: 0.2,
                split_seed: seed,
            },
            embedding: EmbeddingSpec::ToyHash { dim: 16 },
            model: ModelConfig {
                kind: model,
                hidden_choices: vec![16, 24],
                highway: true,
                clamp_predictions: true,
                ff_hidden: None,
            },
            budget: Budget::desk(),
            seed,
        }
    }
}

// ---- layer plans ----

/// What fills one recurrent layer in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanCell {
    Lstm,
    Searched,
    Random,
}

impl PlanCell {
    pub fn notation(self) -> &'static str {
        match self {
            PlanCell::Lstm => "L",
            PlanCell::Searched => "E",
            PlanCell::Random => "RND",
        }
    }
}

/// Per-layer cell plan, e.g. `E / L` = searched cell in layer 1, LSTM in
/// layer 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan(Vec<PlanCell>);

impl LayerPlan {
    pub fn parse(text: &str) -> Result<Self> {
        let cells = text
            .split('/')
            .map(|part| match part.trim() {
                "L" | "l" => Ok(PlanCell::Lstm),
                "E" | "e" => Ok(PlanCell::Searched),
                "RND" | "rnd" => Ok(PlanCell::Random),
                other => bail!("unknown layer cell {other:?} (expected L, E, or RND)"),
            })
            .collect::<Result<Vec<_>>>()?;
        if cells.is_empty() {
            bail!("empty layer plan");
        }
        Ok(LayerPlan(cells))
    }

    /// All-LSTM plan for `kind`.
    pub fn baseline(kind: ModelKind) -> Self {
        LayerPlan(vec![PlanCell::Lstm; kind.layer_count()])
    }

    /// All-searched plan for `kind`.
    pub fn searched(kind: ModelKind) -> Self {
        LayerPlan(vec![PlanCell::Searched; kind.layer_count()])
    }

    pub fn notation(&self) -> String {
        self.0
            .iter()
            .map(|c| c.notation())
            .collect::<Vec<_>>()
            .join(" / ")
    }

    pub fn layers(&self) -> &[PlanCell] {
        &self.0
    }

    pub fn has_genotype_layer(&self) -> bool {
        self.0.iter().any(|c| *c != PlanCell::Lstm)
    }

    /// Every searched slot becomes a random slot (the random-baseline
    /// protocol: same study, different provenance and notation).
    pub fn randomized(&self) -> Self {
        LayerPlan(
            self.0
                .iter()
                .map(|c| match c {
                    PlanCell::Searched | PlanCell::Random => PlanCell::Random,
                    PlanCell::Lstm => PlanCell::Lstm,
                })
                .collect(),
        )
    }

    pub fn validate_for(&self, kind: ModelKind) -> Result<()> {
        if self.0.len() != kind.layer_count() {
            bail!(
                "plan {} has {} layers, but {kind} models have {}",
                self.notation(),
                self.0.len(),
                kind.layer_count()
            );
        }
        Ok(())
    }
}

/// A fixed genotype that occupies searched slots until a trial's assignment
/// (or the search loop) substitutes a real one.
pub fn placeholder_arch() -> CellArchitecture {
    CellArchitecture::parse("Tanh 0:Relu 0:Relu 0:Relu 0:Relu 0:Relu")
        .expect("placeholder genotype is well-formed")
}

/// Model template for one study: dropouts and hidden sizes are placeholders
/// that each trial's assignment overwrites.
pub fn template_spec(config: &ExperimentConfig, plan: &LayerPlan) -> Result<ModelSpec> {
    plan.validate_for(config.model.kind)?;
    let hidden = config.model.hidden_choices[0];
    let spec = ModelSpec {
        kind: config.model.kind,
        cells: plan
            .layers()
            .iter()
            .map(|c| match c {
                PlanCell::Lstm => CellKind::Lstm,
                PlanCell::Searched => CellKind::Enas(placeholder_arch()),
                PlanCell::Random => CellKind::Random(placeholder_arch()),
            })
            .collect(),
        hidden: vec![hidden; config.model.kind.layer_count()],
        task: config.dataset.task(),
        dropout: (0.25, 0.25),
        variational_dropout: 0.25,
        highway: config.model.highway,
        ff_hidden: config.model.ff_hidden,
        clamp_predictions: config.model.clamp_predictions,
    };
    spec.validate()?;
    Ok(spec)
}

/// Tuning space for one study: the standard rows, hidden-size choices per
/// layer, and optionally an architecture categorical. The memory cap drops
/// batch sizes above 32 and the largest hidden choice, trading capacity for
/// footprint.
pub fn tuning_space(
    config: &ExperimentConfig,
    arch_options: Option<Vec<String>>,
) -> Result<SearchSpace> {
    let mut hidden: Vec<f64> = config.model.hidden_choices.iter().map(|&h| h as f64).collect();
    if config.budget.memory_cap && hidden.len() > 1 {
        let max = hidden.iter().cloned().fold(f64::MIN, f64::max);
        hidden.retain(|&h| h != max);
    }
    let space = model_tuning_space(
        config.dataset.task(),
        &hidden,
        config.model.kind.layer_count(),
        arch_options,
    )?;
    if !config.budget.memory_cap {
        return Ok(space);
    }
    let params = space
        .params()
        .iter()
        .map(|p| {
            let mut p = p.clone();
            if p.name == "batch_size" {
                if let ParamDomain::Choice(values) = &mut p.domain {
                    values.retain(|&b| b <= 32.0);
                }
            }
            p
        })
        .collect();
    Ok(SearchSpace::new(params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_plans_parse_and_print_report_notation() {
        let plan = LayerPlan::parse("E / L").unwrap();
        assert_eq!(plan.layers(), &[PlanCell::Searched, PlanCell::Lstm]);
        assert_eq!(plan.notation(), "E / L");
        assert_eq!(LayerPlan::parse("E/L").unwrap(), plan);
        assert_eq!(LayerPlan::parse("rnd").unwrap().notation(), "RND");
        assert!(LayerPlan::parse("E / Q").is_err());
        assert!(LayerPlan::parse("").is_err());

        assert!(LayerPlan::parse("E / L").unwrap().validate_for(ModelKind::Esim).is_ok());
        assert!(LayerPlan::parse("E / L").unwrap().validate_for(ModelKind::Blm).is_err());
        assert_eq!(LayerPlan::baseline(ModelKind::Esim).notation(), "L / L");
        assert_eq!(
            LayerPlan::parse("E / L").unwrap().randomized().notation(),
            "RND / L"
        );
    }

    #[test]
    fn templates_follow_the_plan() {
        let config = ExperimentConfig::synthetic(TaskKind::Classification, ModelKind::Esim, 0);
        let plan = LayerPlan::parse("E / L").unwrap();
        let spec = template_spec(&config, &plan).unwrap();
        assert!(matches!(spec.cells[0], CellKind::Enas(_)));
        assert!(matches!(spec.cells[1], CellKind::Lstm));
        assert_eq!(spec.hidden, vec![16, 16]);

        let wrong = LayerPlan::parse("E").unwrap();
        assert!(template_spec(&config, &wrong).is_err());
    }

    #[test]
    fn memory_cap_shrinks_batch_and_hidden_choices() {
        let mut config = ExperimentConfig::synthetic(TaskKind::Regression, ModelKind::Blm, 0);
        let batch_choices = |space: &SearchSpace| -> Vec<f64> {
            match &space.params().iter().find(|p| p.name == "batch_size").unwrap().domain {
                ParamDomain::Choice(v) => v.clone(),
                other => panic!("batch_size should be a choice, got {other:?}"),
            }
        };
        let hidden_choices = |space: &SearchSpace| -> Vec<f64> {
            match &space.params().iter().find(|p| p.name == "hidden_dim_0").unwrap().domain {
                ParamDomain::Choice(v) => v.clone(),
                other => panic!("hidden_dim_0 should be a choice, got {other:?}"),
            }
        };

        let full = tuning_space(&config, None).unwrap();
        assert_eq!(batch_choices(&full), vec![16.0, 32.0, 64.0]);
        assert_eq!(hidden_choices(&full), vec![16.0, 24.0]);

        config.budget.memory_cap = true;
        let capped = tuning_space(&config, None).unwrap();
        assert_eq!(batch_choices(&capped), vec![16.0, 32.0]);
        assert_eq!(hidden_choices(&capped), vec![16.0]);
    }

    #[test]
    fn baseline_space_has_no_arch_row_and_derived_space_does() {
        let config = ExperimentConfig::synthetic(TaskKind::Classification, ModelKind::Blm, 0);
        let baseline = tuning_space(&config, None).unwrap();
        assert!(baseline.params().iter().all(|p| p.name != "arch"));
        let derived =
            tuning_space(&config, Some(vec![placeholder_arch().serialize()])).unwrap();
        assert!(derived.params().iter().any(|p| p.name == "arch"));
    }

    #[test]
    fn synthetic_config_loads_and_splits() {
        let config = ExperimentConfig::synthetic(TaskKind::Regression, ModelKind::Blm, 3);
        assert_eq!(config.dataset.name(), "synthetic-similarity");
        let splits = config.dataset.load().unwrap();
        assert_eq!(splits.train.len() + splits.dev.len() + splits.test.len(), 160);
        assert_eq!(splits.test.len(), 32);
        assert!(!splits.dev.is_empty());

        let json = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn full_budget_keeps_protocol_scale() {
        let full = Budget::full();
        assert_eq!(full.baseline_trials, 500);
        assert_eq!(full.derived_trials, 200);
        assert_eq!(full.search_epochs, 150);
        assert!(full.validate().is_ok());
        assert!(Budget { concurrency: 0, ..Budget::desk() }.validate().is_err());
    }
}
