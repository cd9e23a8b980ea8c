//! Weight-sharing architecture search and fixed-genotype training.
//!
//! The search alternates two phases over one parameter store. In the shared
//! phase each training minibatch runs under a freshly sampled genotype
//! (`arch_override`) and updates only the child parameters the graph touched.
//! In the controller phase the child is frozen and the policy takes
//! REINFORCE steps against dev-set rewards. Because the optimizer only sees
//! parameters leased by the current graph, each phase leaves the other's
//! parameters bit-identical.
//!
//! Every random draw comes from an RNG keyed by `(seed, stage, epoch)`, never
//! from a stream that persists across epochs, so a search resumed from a
//! checkpoint replays exactly the epochs a fresh run would have produced.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::CellArchitecture;
use crate::controller::{ControllerConfig, ControllerPolicy, RewardBaseline};
use crate::data::{EmbeddingProvider, MetricReport, SentencePairDataset, TaskKind};
use crate::error::{Error, Result};
use crate::hpt::{number_of, text_of, usize_of, Assignment};
use crate::models::{ModelSpec, PairBatch, SentPairModel};
use crate::tensor::{Graph, LossKind, OptimizerSettings, OptimizerState, ParamStore};

// ---- configuration ----

/// Settings for one architecture search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Upper bound on shared/controller alternations.
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best mean reward.
    pub patience: usize,
    pub child_learning_rate: f64,
    pub child_weight_decay: f64,
    /// Global gradient-norm clip for the shared child.
    pub child_grad_clip: f64,
    pub batch_size: usize,
    /// REINFORCE steps per controller phase.
    pub controller_steps: usize,
    /// Architectures sampled (and rewarded) per REINFORCE step.
    pub samples_per_step: usize,
    /// Unique genotypes to derive once the search stops.
    pub derive_count: usize,
    /// Dev examples per reward evaluation; `None` scores the full dev set.
    pub reward_subset: Option<usize>,
    pub controller: ControllerConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_epochs: 150,
            patience: 10,
            child_learning_rate: 1e-4,
            child_weight_decay: 0.0,
            child_grad_clip: 0.25,
            batch_size: 32,
            controller_steps: 10,
            samples_per_step: 4,
            derive_count: 10,
            reward_subset: None,
            controller: ControllerConfig::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// A configuration small enough to run on a workstation in minutes:
    /// fewer alternations and a subsampled reward set, same mechanics.
    pub fn desk(seed: u64) -> Self {
        SearchConfig {
            max_epochs: 10,
            patience: 5,
            child_learning_rate: 1e-3,
            controller_steps: 4,
            samples_per_step: 4,
            reward_subset: Some(128),
            seed,
            ..SearchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0
            || self.patience == 0
            || self.batch_size == 0
            || self.controller_steps == 0
            || self.samples_per_step == 0
            || self.derive_count == 0
        {
            return Err(Error::InvalidArgument(
                "search epochs, patience, batch size, controller steps, samples, and derive count must be positive".into(),
            ));
        }
        if !(self.child_learning_rate > 0.0 && self.child_learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "child learning rate must be positive and finite, got {}",
                self.child_learning_rate
            )));
        }
        if self.child_weight_decay < 0.0 || self.child_grad_clip <= 0.0 {
            return Err(Error::InvalidArgument(
                "child weight decay must be >= 0 and grad clip > 0".into(),
            ));
        }
        if self.reward_subset == Some(0) {
            return Err(Error::InvalidArgument("reward subset must be positive".into()));
        }
        self.controller.validate()
    }
}

// ---- search state ----

/// One completed alternation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean child loss over the shared phase.
    pub train_loss: f64,
    /// Mean reward over every architecture scored this controller phase.
    pub mean_reward: f64,
    /// Controller baseline after the phase.
    pub baseline: f64,
}

/// Everything a search needs to continue: the single parameter store, both
/// optimizers, the controller baseline, and the epoch history. Serializable
/// as a whole, so a JSON dump of this struct *is* the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchState {
    pub config: SearchConfig,
    pub model: SentPairModel,
    pub policy: ControllerPolicy,
    pub baseline: RewardBaseline,
    pub store: ParamStore,
    pub child_opt: OptimizerState,
    pub controller_opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_reward: f64,
    /// Epoch of the best mean reward; 0 before any epoch completes.
    pub best_epoch: usize,
    pub history: Vec<SearchEpochRecord>,
}

/// Stages that need their own RNG stream within one search.
#[derive(Debug, Clone, Copy)]
enum Stage {
    Init,
    Shared,
    Controller,
    Derive,
}

/// RNG keyed by `(seed, stage, epoch)`; resuming at epoch `e` draws exactly
/// what a fresh run would draw at epoch `e`.
fn stage_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let salt = match stage {
        Stage::Init => 1,
        Stage::Shared => 2,
        Stage::Controller => 3,
        Stage::Derive => 4,
    };
    let mut z = seed
        ^ (salt as u64).wrapping_mul(0xA076_1D64_78BD_642F)
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

impl SearchState {
    /// Initializes child and controller parameters in one store. The spec
    /// must contain at least one searched layer; its genotype is a
    /// placeholder that every forward pass overrides.
    pub fn new(config: SearchConfig, spec: ModelSpec, provider: &EmbeddingProvider) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if !spec.cells.iter().any(|c| c.arch().is_some()) {
            return Err(Error::InvalidArgument(
                "search needs a spec with at least one searched (genotype) layer".into(),
            ));
        }
        let mut rng = stage_rng(config.seed, Stage::Init, 0);
        let mut store = ParamStore::new();
        let model = SentPairModel::build(&mut store, "child.", spec, provider, &mut rng)?;
        let policy = ControllerPolicy::init(&mut store, "controller.", config.controller.clone(), &mut rng)?;
        let child_opt = OptimizerState::new(OptimizerSettings::new(
            config.child_learning_rate,
            config.child_weight_decay,
            Some(config.child_grad_clip),
        ));
        let controller_opt = OptimizerState::new(OptimizerSettings::new(
            config.controller.learning_rate,
            0.0,
            None,
        ));
        let baseline = RewardBaseline::new(config.controller.baseline_decay)?;
        Ok(SearchState {
            config,
            model,
            policy,
            baseline,
            store,
            child_opt,
            controller_opt,
            epoch: 0,
            best_reward: f64::NEG_INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        })
    }

    /// True once the epoch budget is spent or the reward has not improved
    /// for `patience` epochs.
    pub fn should_stop(&self) -> bool {
        if self.epoch >= self.config.max_epochs {
            return true;
        }
        self.best_epoch > 0 && self.epoch - self.best_epoch >= self.config.patience
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<SearchState> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

// ---- the two phases ----

/// What one shared phase did.
#[derive(Debug, Clone)]
pub struct SharedPhaseStats {
    pub mean_loss: f64,
    pub batches: usize,
    /// Genotype used for each minibatch, in order.
    pub sampled: Vec<CellArchitecture>,
}

/// One pass over the training set: sample a genotype per minibatch, run the
/// child under it, and update only the parameters that graph leased. The
/// controller is read for sampling but never receives a gradient here.
pub fn train_shared_epoch(
    state: &mut SearchState,
    provider: &EmbeddingProvider,
    train: &SentencePairDataset,
) -> Result<SharedPhaseStats> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let epoch = state.epoch + 1;
    let mut rng = stage_rng(state.config.seed, Stage::Shared, epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);

    let mut total_loss = 0.0;
    let mut batches = 0;
    let mut sampled = Vec::new();
    for chunk in order.chunks(state.config.batch_size) {
        let examples: Vec<_> = chunk.iter().map(|&i| train.examples[i].clone()).collect();
        let batch = PairBatch::new(&examples);
        let (arch, _) = state.policy.sample(&state.store, &mut rng)?;

        let mut g = Graph::new();
        let preds = state
            .model
            .forward(&mut g, &state.store, provider, &batch, true, &mut rng, Some(&arch))?;
        let loss = state.model.loss(&mut g, preds, &batch, LossKind::Mse)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged(format!(
                "shared epoch {epoch}, batch {batches}: loss {loss_value}"
            )));
        }
        g.backward(loss)?;
        state.child_opt.step(&mut state.store, &g.param_grads())?;

        total_loss += loss_value;
        batches += 1;
        sampled.push(arch);
    }
    Ok(SharedPhaseStats {
        mean_loss: total_loss / batches as f64,
        batches,
        sampled,
    })
}

/// What one controller phase did.
#[derive(Debug, Clone)]
pub struct ControllerPhaseStats {
    /// Mean reward across all sampled architectures.
    pub mean_reward: f64,
    /// Mean reward per REINFORCE step, in order.
    pub step_rewards: Vec<f64>,
}

/// Scores one architecture on dev data with the frozen shared weights.
fn dev_reward(
    state: &SearchState,
    provider: &EmbeddingProvider,
    dev: &SentencePairDataset,
    arch: &CellArchitecture,
    rng: &mut impl Rng,
) -> Result<f64> {
    let subset;
    let scored = match state.config.reward_subset {
        Some(k) if k < dev.len() => {
            let mut idx: Vec<usize> = (0..dev.len()).collect();
            idx.shuffle(rng);
            idx.truncate(k);
            subset = SentencePairDataset {
                name: dev.name.clone(),
                task: dev.task,
                label_range: dev.label_range,
                examples: idx.into_iter().map(|i| dev.examples[i].clone()).collect(),
            };
            &subset
        }
        _ => dev,
    };
    let report = state.model.predict_and_score_with(
        &state.store,
        provider,
        scored,
        state.config.batch_size,
        Some(arch),
    )?;
    validate_reward(dev.task, report.primary)?;
    Ok(report.primary)
}

/// Rewards are task metrics, so they live in a known range; anything outside
/// it means the evaluation itself is broken.
fn validate_reward(task: TaskKind, reward: f64) -> Result<()> {
    let ok = match task {
        TaskKind::Classification => (0.0..=1.0).contains(&reward),
        TaskKind::Regression => reward.is_finite() && reward.abs() <= 1.0 + 1e-9,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "reward {reward} outside the valid range for {task:?}"
        )))
    }
}

/// REINFORCE steps with the child frozen: each step samples architectures,
/// scores them on dev data, and updates only the controller parameters.
pub fn controller_phase(
    state: &mut SearchState,
    provider: &EmbeddingProvider,
    dev: &SentencePairDataset,
) -> Result<ControllerPhaseStats> {
    if dev.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let epoch = state.epoch + 1;
    let mut rng = stage_rng(state.config.seed, Stage::Controller, epoch);
    let mut step_rewards = Vec::with_capacity(state.config.controller_steps);
    for _ in 0..state.config.controller_steps {
        let mut traces = Vec::with_capacity(state.config.samples_per_step);
        let mut rewards = Vec::with_capacity(state.config.samples_per_step);
        for _ in 0..state.config.samples_per_step {
            let (arch, trace) = state.policy.sample(&state.store, &mut rng)?;
            rewards.push(dev_reward(state, provider, dev, &arch, &mut rng)?);
            traces.push(trace);
        }
        let stats = state.policy.reinforce_update(
            &mut state.store,
            &mut state.controller_opt,
            &mut state.baseline,
            &traces,
            &rewards,
        )?;
        step_rewards.push(stats.mean_reward);
    }
    let mean_reward = step_rewards.iter().sum::<f64>() / step_rewards.len() as f64;
    Ok(ControllerPhaseStats {
        mean_reward,
        step_rewards,
    })
}

/// One full alternation: shared phase, controller phase, bookkeeping.
pub fn search_epoch(
    state: &mut SearchState,
    provider: &EmbeddingProvider,
    train: &SentencePairDataset,
    dev: &SentencePairDataset,
) -> Result<SharedPhaseStats> {
    let shared = train_shared_epoch(state, provider, train)?;
    let ctrl = controller_phase(state, provider, dev)?;
    state.epoch += 1;
    state.history.push(SearchEpochRecord {
        epoch: state.epoch,
        train_loss: shared.mean_loss,
        mean_reward: ctrl.mean_reward,
        baseline: state.baseline.value(),
    });
    if ctrl.mean_reward > state.best_reward {
        state.best_reward = ctrl.mean_reward;
        state.best_epoch = state.epoch;
    }
    Ok(shared)
}

// ---- derivation ----

/// Samples genotypes from the trained controller until `count` unique ones
/// accumulate, deduplicated by notation. Returns a warning instead of
/// spinning forever if the policy has collapsed onto fewer distinct cells.
pub fn derive_architectures(
    state: &SearchState,
    count: usize,
) -> Result<(Vec<CellArchitecture>, Option<String>)> {
    let mut rng = stage_rng(state.config.seed, Stage::Derive, state.epoch);
    let mut unique = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    let budget = count.saturating_mul(100).max(100);
    for _ in 0..budget {
        if unique.len() == count {
            break;
        }
        let (arch, _) = state.policy.sample(&state.store, &mut rng)?;
        if seen.insert(arch.serialize()) {
            unique.push(arch);
        }
    }
    let warning = (unique.len() < count).then(|| {
        format!(
            "derived only {} unique architectures out of {count} after {budget} samples",
            unique.len()
        )
    });
    Ok((unique, warning))
}

/// A finished search: final state, derived genotypes, and any derivation
/// shortfall.
#[derive(Debug)]
pub struct SearchOutcome {
    pub state: SearchState,
    pub derived: Vec<CellArchitecture>,
    pub warning: Option<String>,
}

/// Continues a (possibly fresh, possibly checkpointed) search until the
/// budget or patience stops it.
pub fn run_search_from(
    state: &mut SearchState,
    provider: &EmbeddingProvider,
    train: &SentencePairDataset,
    dev: &SentencePairDataset,
) -> Result<()> {
    while !state.should_stop() {
        search_epoch(state, provider, train, dev)?;
    }
    Ok(())
}

/// Runs a complete search from scratch and derives candidate genotypes.
pub fn run_search(
    config: SearchConfig,
    spec: ModelSpec,
    provider: &EmbeddingProvider,
    train: &SentencePairDataset,
    dev: &SentencePairDataset,
) -> Result<SearchOutcome> {
    let derive_count = config.derive_count;
    let mut state = SearchState::new(config, spec, provider)?;
    run_search_from(&mut state, provider, train, dev)?;
    let (derived, warning) = derive_architectures(&state, derive_count)?;
    Ok(SearchOutcome {
        state,
        derived,
        warning,
    })
}

// ---- fixed-genotype training ----

/// Settings for training one fixed model (derived cell, random cell, or the
/// LSTM baseline) from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_norm: f64,
    /// Regression loss; classification always uses cross entropy.
    pub loss: LossKind,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a dev improvement.
    pub patience: usize,
    /// Batch size for dev/test scoring.
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            grad_norm: 5.0,
            loss: LossKind::Mse,
            seed: 0,
            max_epochs: 75,
            patience: 10,
            eval_batch: 64,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.eval_batch == 0 {
            return Err(Error::InvalidArgument(
                "batch size, epochs, patience, and eval batch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.weight_decay < 0.0
            || self.grad_norm <= 0.0
        {
            return Err(Error::InvalidArgument(
                "learning rate and grad norm must be positive, weight decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of a fixed-model run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_primary: f64,
}

/// Result of a fixed-model run, evaluated at the best dev epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub dev: MetricReport,
    pub test: Option<MetricReport>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub curve: Vec<FixedEpochRecord>,
}

/// Trains `spec` from scratch, keeping the parameters from the best dev
/// epoch; `test` is scored once with those parameters. Divergence surfaces
/// as an error so a tuner can record the trial as failed rather than crash.
pub fn train_fixed(
    spec: &ModelSpec,
    provider: &EmbeddingProvider,
    train: &SentencePairDataset,
    dev: &SentencePairDataset,
    test: Option<&SentencePairDataset>,
    settings: &TrainSettings,
) -> Result<(SentPairModel, ParamStore, TrainOutcome)> {
    settings.validate()?;
    spec.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut store = ParamStore::new();
    let mut rng = stage_rng(settings.seed, Stage::Init, 0);
    let model = SentPairModel::build(&mut store, "model.", spec.clone(), provider, &mut rng)?;
    let mut opt = OptimizerState::new(OptimizerSettings::new(
        settings.learning_rate,
        settings.weight_decay,
        Some(settings.grad_norm),
    ));

    let mut curve = Vec::new();
    let mut best_primary = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = store.snapshot();
    let mut best_dev = None;
    for epoch in 1..=settings.max_epochs {
        let mut rng = stage_rng(settings.seed, Stage::Shared, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(settings.batch_size) {
            let examples: Vec<_> = chunk.iter().map(|&i| train.examples[i].clone()).collect();
            let batch = PairBatch::new(&examples);
            let mut g = Graph::new();
            let preds = model.forward(&mut g, &store, provider, &batch, true, &mut rng, None)?;
            let loss = model.loss(&mut g, preds, &batch, settings.loss)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {batches}: loss {loss_value}"
                )));
            }
            g.backward(loss)?;
            opt.step(&mut store, &g.param_grads())?;
            total_loss += loss_value;
            batches += 1;
        }

        let report = model.predict_and_score(&store, provider, dev, settings.eval_batch)?;
        curve.push(FixedEpochRecord {
            epoch,
            train_loss: total_loss / batches as f64,
            dev_primary: report.primary,
        });
        if report.primary > best_primary {
            best_primary = report.primary;
            best_epoch = epoch;
            best_params = store.snapshot();
            best_dev = Some(report);
        }
        if epoch - best_epoch >= settings.patience {
            break;
        }
    }

    store.restore(&best_params)?;
    let dev_report = best_dev.expect("at least one epoch ran");
    let test_report = match test {
        Some(t) => Some(model.predict_and_score(&store, provider, t, settings.eval_batch)?),
        None => None,
    };
    let epochs_run = curve.len();
    Ok((
        model,
        store,
        TrainOutcome {
            dev: dev_report,
            test: test_report,
            best_epoch,
            epochs_run,
            curve,
        },
    ))
}

// ---- tuner glue ----

fn loss_from_name(name: &str) -> Result<LossKind> {
    match name {
        "mse" => Ok(LossKind::Mse),
        "mae" => Ok(LossKind::Mae),
        "cross_entropy" => Ok(LossKind::CrossEntropy),
        other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
    }
}

/// Reads the training-side rows of a tuning assignment; budget fields
/// (`max_epochs`, `patience`, `eval_batch`) come from `base`.
pub fn settings_from_assignment(base: &TrainSettings, a: &Assignment) -> Result<TrainSettings> {
    let settings = TrainSettings {
        batch_size: usize_of(a, "batch_size")?,
        learning_rate: number_of(a, "learning_rate")?,
        weight_decay: number_of(a, "weight_decay")?,
        grad_norm: number_of(a, "grad_norm")?,
        loss: loss_from_name(text_of(a, "loss")?)?,
        seed: usize_of(a, "seed")? as u64,
        ..base.clone()
    };
    settings.validate()?;
    Ok(settings)
}

/// Reads the model-side rows of a tuning assignment into a copy of
/// `template`: dropouts, hidden sizes, and (when present) the genotype,
/// which replaces the architecture of every searched layer.
pub fn spec_from_assignment(template: &ModelSpec, a: &Assignment) -> Result<ModelSpec> {
    let mut spec = template.clone();
    spec.dropout = (number_of(a, "dropout_1")?, number_of(a, "dropout_2")?);
    spec.variational_dropout = number_of(a, "variational_dropout")?;
    for layer in 0..spec.hidden.len() {
        spec.hidden[layer] = usize_of(a, &format!("hidden_dim_{layer}"))?;
    }
    if let Ok(text) = text_of(a, "arch") {
        let arch = CellArchitecture::parse(text)?;
        for cell in &mut spec.cells {
            match cell {
                crate::models::CellKind::Lstm => {}
                crate::models::CellKind::Enas(slot) | crate::models::CellKind::Random(slot) => {
                    *slot = arch.clone();
                }
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}
