//! Hyperparameter tuning: a declarative search space, a TPE-style suggester
//! with a pure-random mode, and a concurrent study runner with an append-only
//! JSONL log that supports resuming.
//!
//! The suggester is deliberately small ("TPE-lite"): univariate kernel
//! densities per parameter, truncated Gaussians for continuous values with a
//! neighbor-distance bandwidth, reweighted counts for categoricals, and a
//! good/bad split at a configurable quantile. Everything is maximization.

use crate::data::TaskKind;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Instant;

// ---- search space ----

/// One tunable value: numbers for everything orderable, text for labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_number(&self) -> Result<f64> {
        match self {
            ParamValue::Number(v) => Ok(*v),
            ParamValue::Text(t) => Err(Error::InvalidArgument(format!(
                "expected a number, found {t:?}"
            ))),
        }
    }

    pub fn as_text(&self) -> Result<&str> {
        match self {
            ParamValue::Text(t) => Ok(t),
            ParamValue::Number(v) => Err(Error::InvalidArgument(format!(
                "expected text, found {v}"
            ))),
        }
    }
}

/// A sampled configuration, keyed by parameter name.
pub type Assignment = BTreeMap<String, ParamValue>;

/// Convenience accessors for typed reads out of an [`Assignment`].
pub fn number_of(assignment: &Assignment, name: &str) -> Result<f64> {
    assignment
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("assignment is missing {name:?}")))?
        .as_number()
}

pub fn usize_of(assignment: &Assignment, name: &str) -> Result<usize> {
    let v = number_of(assignment, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::InvalidArgument(format!("{name} = {v} is not a count")));
    }
    Ok(v as usize)
}

pub fn text_of<'a>(assignment: &'a Assignment, name: &str) -> Result<&'a str> {
    assignment
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("assignment is missing {name:?}")))?
        .as_text()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamDomain {
    /// Numeric categorical (batch sizes, hidden dims, seeds).
    Choice(Vec<f64>),
    /// Text categorical (loss names, architecture strings).
    Options(Vec<String>),
    Uniform { low: f64, high: f64 },
    /// Uniform in log space; bounds must be positive.
    LogUniform { low: f64, high: f64 },
}

impl ParamDomain {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            ParamDomain::Choice(vs) if vs.is_empty() => Err(Error::InvalidArgument(format!(
                "{name}: empty choice list"
            ))),
            ParamDomain::Options(vs) if vs.is_empty() => Err(Error::InvalidArgument(format!(
                "{name}: empty options list"
            ))),
            ParamDomain::Uniform { low, high } if !(low < high) => Err(Error::InvalidArgument(
                format!("{name}: bounds [{low}, {high}] are empty"),
            )),
            ParamDomain::LogUniform { low, high } if !(0.0 < *low && low < high) => {
                Err(Error::InvalidArgument(format!(
                    "{name}: log-scale bounds [{low}, {high}] must be positive and ordered"
                )))
            }
            _ => Ok(()),
        }
    }

    fn sample_uniform(&self, rng: &mut impl Rng) -> ParamValue {
        match self {
            ParamDomain::Choice(vs) => ParamValue::Number(vs[rng.gen_range(0..vs.len())]),
            ParamDomain::Options(vs) => ParamValue::Text(vs[rng.gen_range(0..vs.len())].clone()),
            ParamDomain::Uniform { low, high } => ParamValue::Number(rng.gen_range(*low..*high)),
            ParamDomain::LogUniform { low, high } => {
                ParamValue::Number(rng.gen_range(low.ln()..high.ln()).exp())
            }
        }
    }

    fn contains(&self, value: &ParamValue) -> bool {
        match (self, value) {
            (ParamDomain::Choice(vs), ParamValue::Number(v)) => vs.contains(v),
            (ParamDomain::Options(vs), ParamValue::Text(t)) => vs.iter().any(|o| o == t),
            (ParamDomain::Uniform { low, high }, ParamValue::Number(v)) => {
                (*low..=*high).contains(v)
            }
            (ParamDomain::LogUniform { low, high }, ParamValue::Number(v)) => {
                (*low..=*high).contains(v)
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub domain: ParamDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    params: Vec<ParamDecl>,
}

impl SearchSpace {
    pub fn new(params: Vec<ParamDecl>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &params {
            p.domain.validate(&p.name)?;
            if !seen.insert(p.name.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter {:?}",
                    p.name
                )));
            }
        }
        Ok(SearchSpace { params })
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn sample_uniform(&self, rng: &mut impl Rng) -> Assignment {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.domain.sample_uniform(rng)))
            .collect()
    }

    pub fn contains(&self, assignment: &Assignment) -> bool {
        assignment.len() == self.params.len()
            && self.params.iter().all(|p| {
                assignment
                    .get(&p.name)
                    .map(|v| p.domain.contains(v))
                    .unwrap_or(false)
            })
    }
}

/// The standard model-tuning space: batch size, log-scale learning rate,
/// loss (task-dependent), weight decay, gradient-norm threshold, the three
/// dropout rates, one hidden size per recurrent layer, a data-order seed,
/// and optionally a categorical architecture choice.
pub fn model_tuning_space(
    task: TaskKind,
    hidden_choices: &[f64],
    layers: usize,
    arch_options: Option<Vec<String>>,
) -> Result<SearchSpace> {
    if layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    let mut params = vec![
        ParamDecl {
            name: "batch_size".into(),
            domain: ParamDomain::Choice(vec![16.0, 32.0, 64.0]),
        },
        ParamDecl {
            name: "learning_rate".into(),
            domain: ParamDomain::LogUniform { low: 1e-4, high: 1e-2 },
        },
        ParamDecl {
            name: "loss".into(),
            domain: ParamDomain::Options(match task {
                TaskKind::Classification => vec!["cross_entropy".into()],
                TaskKind::Regression => vec!["mse".into(), "mae".into()],
            }),
        },
        ParamDecl {
            name: "weight_decay".into(),
            domain: ParamDomain::Uniform { low: 0.001, high: 0.1 },
        },
        ParamDecl {
            name: "grad_norm".into(),
            domain: ParamDomain::Uniform { low: 0.25, high: 20.0 },
        },
        ParamDecl {
            name: "dropout_1".into(),
            domain: ParamDomain::Uniform { low: 0.25, high: 0.75 },
        },
        ParamDecl {
            name: "dropout_2".into(),
            domain: ParamDomain::Uniform { low: 0.25, high: 0.75 },
        },
        ParamDecl {
            name: "variational_dropout".into(),
            domain: ParamDomain::Uniform { low: 0.25, high: 0.75 },
        },
        ParamDecl {
            name: "seed".into(),
            domain: ParamDomain::Choice((0..6).map(|s| s as f64).collect()),
        },
    ];
    for layer in 0..layers {
        params.push(ParamDecl {
            name: format!("hidden_dim_{layer}"),
            domain: ParamDomain::Choice(hidden_choices.to_vec()),
        });
    }
    if let Some(archs) = arch_options {
        params.push(ParamDecl {
            name: "arch".into(),
            domain: ParamDomain::Options(archs),
        });
    }
    SearchSpace::new(params)
}

// ---- trials ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Pending,
    Running,
    Done,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub params: Assignment,
    pub status: TrialStatus,
    /// Dev metric (maximized); absent for failed trials.
    pub objective: Option<f64>,
    pub seconds: f64,
}

/// Highest finite objective among done trials; ties go to the earliest id.
pub fn best_trial(trials: &[Trial]) -> Result<&Trial> {
    trials
        .iter()
        .filter(|t| t.status == TrialStatus::Done && t.objective.is_some())
        .max_by(|a, b| {
            let (oa, ob) = (a.objective.unwrap(), b.objective.unwrap());
            oa.partial_cmp(&ob)
                .unwrap()
                // ties resolved toward the earlier trial
                .then(b.id.cmp(&a.id))
        })
        .ok_or_else(|| Error::InvalidArgument("no completed trials".into()))
}

// ---- TPE suggestion ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    /// Fraction of trials treated as "good" when splitting.
    pub gamma: f64,
    /// Completed trials required before density-based suggestions start.
    pub startup: usize,
    /// Samples drawn from the good density per parameter per suggestion.
    pub candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.1,
            startup: 10,
            candidates: 24,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if self.startup == 0 || self.candidates == 0 {
            return Err(Error::InvalidArgument(
                "startup and candidate counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Completed-trial history feeding the suggester. Failed trials participate
/// with the worst possible score so their regions look unattractive.
#[derive(Debug, Clone)]
pub struct TpeState {
    config: TpeConfig,
    completed: Vec<(Assignment, f64)>,
}

impl TpeState {
    pub fn new(config: TpeConfig) -> Result<Self> {
        config.validate()?;
        Ok(TpeState {
            config,
            completed: Vec::new(),
        })
    }

    pub fn record(&mut self, trial: &Trial) {
        let score = trial.objective.unwrap_or(f64::NEG_INFINITY);
        self.completed.push((trial.params.clone(), score));
    }

    pub fn completed(&self) -> usize {
        self.completed.len()
    }

    /// Draws the next assignment: uniform during startup, afterwards the
    /// candidate maximizing good-density / bad-density per parameter.
    pub fn suggest(&self, space: &SearchSpace, rng: &mut impl Rng) -> Assignment {
        if self.completed.len() < self.config.startup {
            return space.sample_uniform(rng);
        }
        let mut order: Vec<usize> = (0..self.completed.len()).collect();
        order.sort_by(|&a, &b| {
            self.completed[b]
                .1
                .partial_cmp(&self.completed[a].1)
                .unwrap()
                .then(a.cmp(&b))
        });
        let n = order.len();
        // Keep the good set small even in long studies; a wide quantile lets
        // a mediocre value that floods the history pin the threshold at
        // itself and trap the suggester on one point.
        let n_good = ((self.config.gamma * n as f64).ceil() as usize)
            .min(25)
            .clamp(1, n - 1);
        let (good_idx, bad_idx) = order.split_at(n_good);
        let mut out = Assignment::new();
        for p in space.params() {
            let pick = |idx: &[usize]| -> Vec<&ParamValue> {
                idx.iter()
                    .filter_map(|&i| self.completed[i].0.get(&p.name))
                    .collect()
            };
            let good = pick(good_idx);
            let bad = pick(bad_idx);
            let value = match &p.domain {
                ParamDomain::Choice(choices) => {
                    let cats: Vec<ParamValue> =
                        choices.iter().map(|&c| ParamValue::Number(c)).collect();
                    suggest_categorical(&cats, &good, &bad, self.config.candidates, rng)
                }
                ParamDomain::Options(options) => {
                    let cats: Vec<ParamValue> =
                        options.iter().map(|o| ParamValue::Text(o.clone())).collect();
                    suggest_categorical(&cats, &good, &bad, self.config.candidates, rng)
                }
                ParamDomain::Uniform { low, high } => ParamValue::Number(suggest_continuous(
                    *low,
                    *high,
                    false,
                    &good,
                    &bad,
                    self.config.candidates,
                    rng,
                )),
                ParamDomain::LogUniform { low, high } => ParamValue::Number(suggest_continuous(
                    *low,
                    *high,
                    true,
                    &good,
                    &bad,
                    self.config.candidates,
                    rng,
                )),
            };
            out.insert(p.name.clone(), value);
        }
        out
    }
}

/// Density ratio over categories with add-one smoothing on both sides.
fn suggest_categorical(
    categories: &[ParamValue],
    good: &[&ParamValue],
    bad: &[&ParamValue],
    candidates: usize,
    rng: &mut impl Rng,
) -> ParamValue {
    let weights = |observed: &[&ParamValue]| -> Vec<f64> {
        let mut w: Vec<f64> = vec![1.0; categories.len()];
        for v in observed {
            if let Some(k) = categories.iter().position(|c| &c == v) {
                w[k] += 1.0;
            }
        }
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    };
    let pg = weights(good);
    let pb = weights(bad);
    let mut best: Option<(f64, usize)> = None;
    for _ in 0..candidates {
        // draw from the good distribution
        let r: f64 = rng.gen_range(0.0..1.0);
        let mut cum = 0.0;
        let mut k = categories.len() - 1;
        for (i, &w) in pg.iter().enumerate() {
            cum += w;
            if r < cum {
                k = i;
                break;
            }
        }
        let score = pg[k].ln() - pb[k].ln();
        if best.map(|(s, _)| score > s).unwrap_or(true) {
            best = Some((score, k));
        }
    }
    categories[best.expect("at least one candidate").1].clone()
}

/// Truncated-Gaussian mixture ratio in (optionally log-transformed) space.
fn suggest_continuous(
    low: f64,
    high: f64,
    log_scale: bool,
    good: &[&ParamValue],
    bad: &[&ParamValue],
    candidates: usize,
    rng: &mut impl Rng,
) -> f64 {
    let tf = |v: f64| if log_scale { v.ln() } else { v };
    let (lo, hi) = (tf(low), tf(high));
    let values = |observed: &[&ParamValue]| -> Vec<f64> {
        observed
            .iter()
            .filter_map(|v| v.as_number().ok())
            .map(tf)
            .collect()
    };
    let good_kde = Kde::fit(lo, hi, &values(good));
    let bad_kde = Kde::fit(lo, hi, &values(bad));
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..candidates {
        let x = good_kde.sample(rng);
        let score = good_kde.log_density(x) - bad_kde.log_density(x);
        if best.map(|(s, _)| score > s).unwrap_or(true) {
            best = Some((score, x));
        }
    }
    let x = best.expect("at least one candidate").1;
    if log_scale {
        x.exp()
    } else {
        x
    }
}

/// Equal-weight mixture of truncated Gaussians: one per observation with a
/// neighbor-distance bandwidth, plus a wide prior component over the range.
struct Kde {
    lo: f64,
    hi: f64,
    components: Vec<(f64, f64)>, // (mean, sigma)
}

impl Kde {
    fn fit(lo: f64, hi: f64, observations: &[f64]) -> Kde {
        let range = hi - lo;
        let mut sorted = observations.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut components = vec![(0.5 * (lo + hi), range)]; // prior
        for (i, &x) in sorted.iter().enumerate() {
            let left = if i == 0 { x - lo } else { x - sorted[i - 1] };
            let right = if i + 1 == sorted.len() { hi - x } else { sorted[i + 1] - x };
            let sigma = left.max(right).clamp(range * 0.01, range);
            components.push((x, sigma));
        }
        Kde { lo, hi, components }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let (mean, sigma) = self.components[rng.gen_range(0..self.components.len())];
        // rejection against the bounds; the prior keeps acceptance healthy
        for _ in 0..128 {
            let z = standard_normal(rng);
            let x = mean + sigma * z;
            if x >= self.lo && x <= self.hi {
                return x;
            }
        }
        rng.gen_range(self.lo..self.hi)
    }

    fn log_density(&self, x: f64) -> f64 {
        let mut total = 0.0;
        for &(mean, sigma) in &self.components {
            let z = (x - mean) / sigma;
            let pdf = (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let mass = normal_cdf((self.hi - mean) / sigma) - normal_cdf((self.lo - mean) / sigma);
            total += pdf / mass.max(1e-12);
        }
        (total / self.components.len() as f64).max(1e-300).ln()
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from 0 so the log stays finite
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Abramowitz-Stegun 7.1.26 approximation, |error| < 1.5e-7.
fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    let signed = if x < 0.0 { -erf } else { erf };
    0.5 * (1.0 + signed)
}

// ---- study runner ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    Tpe,
    Random,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub n_trials: usize,
    pub concurrency: usize,
    pub mode: StudyMode,
    pub seed: u64,
    pub tpe: TpeConfig,
    /// JSONL trial log, written incrementally in trial-id order.
    pub log_path: Option<PathBuf>,
    /// Reload finished trials from the log instead of starting over.
    pub resume: bool,
}

impl StudyConfig {
    pub fn new(n_trials: usize, mode: StudyMode, seed: u64) -> Self {
        StudyConfig {
            n_trials,
            concurrency: 1,
            mode,
            seed,
            tpe: TpeConfig::default(),
            log_path: None,
            resume: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.concurrency == 0 {
            return Err(Error::InvalidArgument(
                "trial count and concurrency must be positive".into(),
            ));
        }
        self.tpe.validate()
    }
}

/// RNG for one trial; a function of the study seed and trial id only, so
/// concurrency cannot change what gets sampled.
pub fn trial_rng(study_seed: u64, trial_id: usize) -> ChaCha8Rng {
    let mut z = study_seed ^ (trial_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn append_log(path: &Path, trial: &Trial) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(trial)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Parses a study log; records must form a contiguous id prefix.
pub fn load_study_log(path: &Path) -> Result<Vec<Trial>> {
    let file = std::fs::File::open(path)?;
    let mut trials = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trial: Trial = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if trial.id != trials.len() {
            return Err(Error::Parse(format!(
                "{}: trial ids are not a contiguous prefix (found {} at position {})",
                path.display(),
                trial.id,
                trials.len()
            )));
        }
        trials.push(trial);
    }
    Ok(trials)
}

/// Runs a study. The objective receives `(trial_id, assignment)` and returns
/// the dev metric to maximize; errors, panics, and non-finite values mark
/// the trial failed without stopping the study.
pub fn run_study<F>(space: &SearchSpace, config: &StudyConfig, objective: F) -> Result<Vec<Trial>>
where
    F: Fn(usize, &Assignment) -> Result<f64> + Send + Sync,
{
    config.validate()?;
    let mut tpe = TpeState::new(config.tpe)?;
    let mut trials: Vec<Trial> = Vec::with_capacity(config.n_trials);

    if config.resume {
        if let Some(path) = config.log_path.as_deref() {
            if path.exists() {
                trials = load_study_log(path)?;
                if trials.len() > config.n_trials {
                    return Err(Error::InvalidArgument(format!(
                        "log already holds {} trials but the study wants {}",
                        trials.len(),
                        config.n_trials
                    )));
                }
                for t in &trials {
                    tpe.record(t);
                }
            }
        }
    } else if let Some(path) = config.log_path.as_deref() {
        if path.exists() {
            std::fs::remove_file(path)?;
        }
    }

    let first_new = trials.len();
    if first_new == config.n_trials {
        return Ok(trials);
    }

    let suggest = |tpe: &TpeState, id: usize| -> Assignment {
        let mut rng = trial_rng(config.seed, id);
        match config.mode {
            StudyMode::Random => space.sample_uniform(&mut rng),
            StudyMode::Tpe => tpe.suggest(space, &mut rng),
        }
    };

    let objective = &objective;

    std::thread::scope(|scope| -> Result<()> {
        let (job_tx, job_rx) = mpsc::channel::<(usize, Assignment)>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let (result_tx, result_rx) = mpsc::channel::<Trial>();
        for _ in 0..config.concurrency.min(config.n_trials - first_new) {
            let job_rx = Arc::clone(&job_rx);
            let result_tx = result_tx.clone();
            scope.spawn(move || loop {
                let job = job_rx.lock().expect("job queue poisoned").recv();
                let (id, params) = match job {
                    Ok(j) => j,
                    Err(_) => break,
                };
                let start = Instant::now();
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    objective(id, &params)
                }));
                let seconds = start.elapsed().as_secs_f64();
                let (status, objective_value) = match outcome {
                    Ok(Ok(v)) if v.is_finite() => (TrialStatus::Done, Some(v)),
                    Ok(Ok(v)) => (TrialStatus::Failed(format!("non-finite objective {v}")), None),
                    Ok(Err(e)) => (TrialStatus::Failed(e.to_string()), None),
                    Err(_) => (TrialStatus::Failed("objective panicked".into()), None),
                };
                let _ = result_tx.send(Trial {
                    id,
                    params,
                    status,
                    objective: objective_value,
                    seconds,
                });
            });
        }
        drop(result_tx);

        let mut next_id = first_new;
        let mut dispatch_initial = config.concurrency.min(config.n_trials - first_new);
        while dispatch_initial > 0 {
            job_tx
                .send((next_id, suggest(&tpe, next_id)))
                .expect("workers alive");
            next_id += 1;
            dispatch_initial -= 1;
        }

        let mut finished: BTreeMap<usize, Trial> = BTreeMap::new();
        let mut logged = first_new;
        let mut remaining = config.n_trials - first_new;
        while remaining > 0 {
            let trial = result_rx.recv().expect("a worker is still running");
            tpe.record(&trial);
            finished.insert(trial.id, trial);
            remaining -= 1;
            if next_id < config.n_trials {
                job_tx
                    .send((next_id, suggest(&tpe, next_id)))
                    .expect("workers alive");
                next_id += 1;
            }
            // flush the contiguous prefix so the log stays in id order
            while let Some(trial) = finished.remove(&logged) {
                if let Some(path) = config.log_path.as_deref() {
                    append_log(path, &trial)?;
                }
                trials.push(trial);
                logged += 1;
            }
        }
        // closing the queue lets idle workers exit before the scope joins
        drop(job_tx);
        Ok(())
    })?;

    Ok(trials)
}
