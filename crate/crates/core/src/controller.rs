//! The architecture-sampling policy: a small LSTM that emits the 11 cell
//! decisions autoregressively and learns from dev-set reward via REINFORCE
//! with an exponential-moving-average baseline.

use crate::cell::{ActivationOp, CellArchitecture, LINK_COUNT, NODE_COUNT};
use crate::error::{Error, Result};
use crate::models::{lstm_step, LstmCellParams};
use crate::tensor::{Graph, OptimizerState, ParamId, ParamStore, Tensor, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Cell nodes governed by the policy. The full space uses 6; smaller
    /// values exist so tests can enumerate every architecture.
    pub nodes: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    /// Logits are divided by this before the tanh squash.
    pub temperature: f64,
    /// Squashed logit = tanh_constant * tanh(logit / temperature).
    pub tanh_constant: f64,
    pub entropy_weight: f64,
    pub baseline_decay: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            nodes: NODE_COUNT,
            hidden: 64,
            learning_rate: 3.5e-4,
            temperature: 5.0,
            tanh_constant: 2.5,
            entropy_weight: 1e-4,
            baseline_decay: 0.999,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 {
            return Err(Error::InvalidArgument(
                "the policy needs at least 2 nodes (one input decision)".into(),
            ));
        }
        if self.hidden == 0 || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "controller hidden size and learning rate must be positive".into(),
            ));
        }
        if self.temperature <= 0.0 || self.tanh_constant <= 0.0 || self.entropy_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "temperature and tanh constant must be positive, entropy weight non-negative".into(),
            ));
        }
        if !(0.0 < self.baseline_decay && self.baseline_decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "baseline decay {} outside (0, 1)",
                self.baseline_decay
            )));
        }
        Ok(())
    }

    /// 1 op for node 0, then (input, op) per later node.
    pub fn decision_count(&self) -> usize {
        2 * self.nodes - 1
    }
}

/// What one autoregressive step chooses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decision {
    Op,
    /// Which earlier node feeds `node`; indices >= node are masked off.
    Input { node: usize },
}

fn decision_plan(nodes: usize) -> Vec<Decision> {
    let mut plan = vec![Decision::Op];
    for node in 1..nodes {
        plan.push(Decision::Input { node });
        plan.push(Decision::Op);
    }
    plan
}

/// One sampled architecture with everything REINFORCE needs to score it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleTrace {
    /// The raw decision sequence (ops as indices into [`ActivationOp::ALL`]).
    pub decisions: Vec<usize>,
    /// Log probability of each decision at sampling time.
    pub log_probs: Vec<f64>,
    /// Summed entropy of the per-decision distributions.
    pub entropy: f64,
}

impl SampleTrace {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Exponential moving average of recent rewards.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardBaseline {
    value: f64,
    decay: f64,
}

impl RewardBaseline {
    pub fn new(decay: f64) -> Result<Self> {
        Self::with_value(decay, 0.0)
    }

    pub fn with_value(decay: f64, value: f64) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "baseline decay {decay} outside (0, 1)"
            )));
        }
        Ok(RewardBaseline { value, decay })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn observe(&mut self, mean_reward: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward;
    }
}

/// What one policy update did.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_reward: f64,
    /// Baseline value after folding in this batch.
    pub baseline: f64,
    pub grad_norm: f64,
}

/// The policy network. Parameters live in a [`ParamStore`]; this struct only
/// holds their ids plus the configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerPolicy {
    config: ControllerConfig,
    lstm: LstmCellParams,
    /// Learned first input, `[1, hidden]`.
    start: ParamId,
    /// Per-position tables embedding the decision taken there; the table at
    /// position p feeds step p+1, so the final position has none.
    embeddings: Vec<ParamId>,
    op_w: ParamId,
    op_b: ParamId,
    input_w: ParamId,
    input_b: ParamId,
}

impl ControllerPolicy {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: ControllerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        const SCALE: f64 = 0.08;
        let h = config.hidden;
        let lstm = LstmCellParams::init(store, &format!("{prefix}lstm."), h, h, rng)?;
        let start = store.register(
            &format!("{prefix}start"),
            Tensor::rand_uniform(vec![1, h], -SCALE, SCALE, rng),
        )?;
        let plan = decision_plan(config.nodes);
        let mut embeddings = Vec::with_capacity(plan.len() - 1);
        for (p, kind) in plan.iter().take(plan.len() - 1).enumerate() {
            let vocab = head_width(&config, *kind);
            embeddings.push(store.register(
                &format!("{prefix}emb_{p}"),
                Tensor::rand_uniform(vec![vocab, h], -SCALE, SCALE, rng),
            )?);
        }
        let input_width = config.nodes - 1;
        Ok(ControllerPolicy {
            lstm,
            start,
            embeddings,
            op_w: store.register(
                &format!("{prefix}op_w"),
                Tensor::rand_uniform(vec![h, ActivationOp::ALL.len()], -SCALE, SCALE, rng),
            )?,
            op_b: store.register(&format!("{prefix}op_b"), Tensor::zeros(vec![ActivationOp::ALL.len()]))?,
            input_w: store.register(
                &format!("{prefix}input_w"),
                Tensor::rand_uniform(vec![h, input_width], -SCALE, SCALE, rng),
            )?,
            input_b: store.register(&format!("{prefix}input_b"), Tensor::zeros(vec![input_width]))?,
            config,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// 0/1 validity over the head's slots for one decision.
    fn mask_row(&self, kind: Decision) -> Vec<f64> {
        let width = head_width(&self.config, kind);
        let valid = valid_choices(kind);
        let mut row = vec![0.0; width];
        row[..valid].fill(1.0);
        row
    }

    /// Squashed logits for one decision given the LSTM output `h` `[b, H]`.
    fn decision_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: TensorId,
        kind: Decision,
    ) -> Result<TensorId> {
        let (w, b) = match kind {
            Decision::Op => (self.op_w, self.op_b),
            Decision::Input { .. } => (self.input_w, self.input_b),
        };
        let w = g.param(store, w)?;
        let b = g.param(store, b)?;
        let z = g.matmul(h, w)?;
        let z = g.add_bias(z, b)?;
        let z = g.affine(z, 1.0 / self.config.temperature, 0.0)?;
        let z = g.tanh(z)?;
        g.affine(z, self.config.tanh_constant, 0.0)
    }

    /// Draws one decision sequence and its trace.
    pub fn sample_decisions(
        &self,
        store: &ParamStore,
        rng: &mut impl Rng,
    ) -> Result<(Vec<usize>, SampleTrace)> {
        let plan = decision_plan(self.config.nodes);
        let hdim = self.config.hidden;
        let mut g = Graph::new();
        let mut h = g.constant(Tensor::zeros(vec![1, hdim]))?;
        let mut c = g.constant(Tensor::zeros(vec![1, hdim]))?;
        let mut x = g.param(store, self.start)?;
        let mut decisions = Vec::with_capacity(plan.len());
        let mut log_probs = Vec::with_capacity(plan.len());
        let mut entropy = 0.0;
        for (p, kind) in plan.iter().enumerate() {
            let (h2, c2) = lstm_step(&mut g, store, &self.lstm, x, h, c)?;
            h = h2;
            c = c2;
            let logits = self.decision_logits(&mut g, store, h, *kind)?;
            let mask = g.constant(Tensor::from_vec(
                vec![1, head_width(&self.config, *kind)],
                self.mask_row(*kind),
            )?)?;
            let probs_id = g.softmax(logits, 1, Some(mask))?;
            let logp_id = g.log_softmax(logits, 1, Some(mask))?;
            let probs = g.value(probs_id).data().to_vec();
            let logp = g.value(logp_id).data().to_vec();
            let choice = sample_categorical(&probs, rng);
            decisions.push(choice);
            log_probs.push(logp[choice]);
            // masked slots hold p = 0 and logp = 0, so they drop out here
            entropy -= probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            if p + 1 < plan.len() {
                let table = store.value(self.embeddings[p]);
                let row = table.data()[choice * hdim..(choice + 1) * hdim].to_vec();
                x = g.constant(Tensor::from_vec(vec![1, hdim], row)?)?;
            }
        }
        let trace = SampleTrace {
            decisions: decisions.clone(),
            log_probs,
            entropy,
        };
        Ok((decisions, trace))
    }

    /// Samples a full-space architecture; requires the default node count.
    pub fn sample(
        &self,
        store: &ParamStore,
        rng: &mut impl Rng,
    ) -> Result<(CellArchitecture, SampleTrace)> {
        let (decisions, trace) = self.sample_decisions(store, rng)?;
        Ok((arch_from_decisions(&decisions)?, trace))
    }

    /// Log probability of a decision sequence; exactly `-inf` when any
    /// decision is masked off (probability zero).
    pub fn log_prob_decisions(&self, store: &ParamStore, decisions: &[usize]) -> Result<f64> {
        let plan = decision_plan(self.config.nodes);
        if decisions.len() != plan.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} decisions, got {}",
                plan.len(),
                decisions.len()
            )));
        }
        for (d, kind) in decisions.iter().zip(&plan) {
            if *d >= head_width(&self.config, *kind) {
                return Err(Error::InvalidArgument(format!(
                    "decision {d} outside the head for {kind:?}"
                )));
            }
            if *d >= valid_choices(*kind) {
                return Ok(f64::NEG_INFINITY);
            }
        }
        let mut g = Graph::new();
        let (logpi, _) = self.teacher_forced(&mut g, store, &[decisions])?;
        g.value(logpi).data().first().copied().ok_or(Error::EmptyBatch)
    }

    pub fn log_prob(&self, store: &ParamStore, arch: &CellArchitecture) -> Result<f64> {
        self.log_prob_decisions(store, &decisions_of(arch))
    }

    /// Differentiable teacher-forced pass over a batch of decision
    /// sequences; returns per-sequence total log probability and entropy,
    /// both `[batch]`.
    fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&[usize]],
    ) -> Result<(TensorId, TensorId)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let plan = decision_plan(self.config.nodes);
        let bsz = batch.len();
        let hdim = self.config.hidden;
        let mut h = g.constant(Tensor::zeros(vec![bsz, hdim]))?;
        let mut c = g.constant(Tensor::zeros(vec![bsz, hdim]))?;
        // broadcast the learned start row to the batch
        let ones = g.constant(Tensor::full(vec![bsz, 1], 1.0))?;
        let start = g.param(store, self.start)?;
        let mut x = g.matmul(ones, start)?;
        let mut total_logpi: Option<TensorId> = None;
        let mut total_ent: Option<TensorId> = None;
        for (p, kind) in plan.iter().enumerate() {
            let (h2, c2) = lstm_step(g, store, &self.lstm, x, h, c)?;
            h = h2;
            c = c2;
            let width = head_width(&self.config, *kind);
            let logits = self.decision_logits(g, store, h, *kind)?;
            let row = self.mask_row(*kind);
            let mask_data: Vec<f64> = row.iter().cycle().take(bsz * width).copied().collect();
            let mask = g.constant(Tensor::from_vec(vec![bsz, width], mask_data)?)?;
            let logp = g.log_softmax(logits, 1, Some(mask))?;
            let probs = g.softmax(logits, 1, Some(mask))?;
            let choices: Vec<usize> = batch.iter().map(|d| d[p]).collect();
            for &ch in &choices {
                if ch >= valid_choices(*kind) {
                    return Err(Error::InvalidArgument(format!(
                        "decision {ch} is masked off for {kind:?}"
                    )));
                }
            }
            let picked = g.gather(logp, &choices)?;
            total_logpi = Some(match total_logpi {
                Some(t) => g.add(t, picked)?,
                None => picked,
            });
            let plogp = g.mul(probs, logp)?;
            let ones_col = g.constant(Tensor::full(vec![width, 1], 1.0))?;
            let row_sum = g.matmul(plogp, ones_col)?;
            let row_sum = g.reshape(row_sum, vec![bsz])?;
            let ent = g.affine(row_sum, -1.0, 0.0)?;
            total_ent = Some(match total_ent {
                Some(t) => g.add(t, ent)?,
                None => ent,
            });
            if p + 1 < plan.len() {
                let mut onehot = vec![0.0; bsz * width];
                for (i, &ch) in choices.iter().enumerate() {
                    onehot[i * width + ch] = 1.0;
                }
                let onehot = g.constant(Tensor::from_vec(vec![bsz, width], onehot)?)?;
                let table = g.param(store, self.embeddings[p])?;
                x = g.matmul(onehot, table)?;
            }
        }
        Ok((total_logpi.expect("plan is non-empty"), total_ent.expect("plan is non-empty")))
    }

    /// One REINFORCE step over a batch of traces: loss is
    /// `-mean((R - b) * log pi) - entropy_weight * mean(entropy)`, with the
    /// baseline folded forward afterwards.
    pub fn reinforce_update(
        &self,
        store: &mut ParamStore,
        optimizer: &mut OptimizerState,
        baseline: &mut RewardBaseline,
        traces: &[SampleTrace],
        rewards: &[f64],
    ) -> Result<UpdateStats> {
        if traces.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if traces.len() != rewards.len() {
            return Err(Error::InvalidArgument(format!(
                "{} traces against {} rewards",
                traces.len(),
                rewards.len()
            )));
        }
        let mut g = Graph::new();
        let decisions: Vec<&[usize]> = traces.iter().map(|t| t.decisions.as_slice()).collect();
        let (logpi, ent) = self.teacher_forced(&mut g, store, &decisions)?;
        let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline.value()).collect();
        let adv = g.constant(Tensor::from_vec(vec![traces.len()], advantages)?)?;
        let weighted = g.mul(logpi, adv)?;
        let mean_weighted = g.mean_all(weighted)?;
        let policy_term = g.affine(mean_weighted, -1.0, 0.0)?;
        let mean_ent = g.mean_all(ent)?;
        let ent_term = g.affine(mean_ent, -self.config.entropy_weight, 0.0)?;
        let loss = g.add(policy_term, ent_term)?;
        g.backward(loss)?;
        let grads = g.param_grads();
        let grad_norm = optimizer.step(store, &grads)?;
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        baseline.observe(mean_reward);
        Ok(UpdateStats {
            loss: g.value(loss).item(),
            mean_reward,
            baseline: baseline.value(),
            grad_norm,
        })
    }
}

fn head_width(config: &ControllerConfig, kind: Decision) -> usize {
    match kind {
        Decision::Op => ActivationOp::ALL.len(),
        Decision::Input { .. } => config.nodes - 1,
    }
}

fn valid_choices(kind: Decision) -> usize {
    match kind {
        Decision::Op => ActivationOp::ALL.len(),
        Decision::Input { node } => node,
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let r: f64 = rng.gen_range(0.0..1.0);
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if r < cum {
                return i;
            }
        }
    }
    last_positive
}

fn op_index(op: ActivationOp) -> usize {
    ActivationOp::ALL
        .iter()
        .position(|&o| o == op)
        .expect("every op is listed")
}

/// Flattens a full-space architecture to its decision sequence.
pub fn decisions_of(arch: &CellArchitecture) -> Vec<usize> {
    let mut out = vec![op_index(arch.node0_op())];
    for &(input, op) in arch.links() {
        out.push(input);
        out.push(op_index(op));
    }
    out
}

/// Rebuilds a full-space architecture from its decision sequence.
pub fn arch_from_decisions(decisions: &[usize]) -> Result<CellArchitecture> {
    if decisions.len() != 2 * NODE_COUNT - 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} decisions for {NODE_COUNT} nodes, got {}",
            2 * NODE_COUNT - 1,
            decisions.len()
        )));
    }
    let decode_op = |idx: usize| -> Result<ActivationOp> {
        ActivationOp::ALL
            .get(idx)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("op index {idx} out of range")))
    };
    let node0 = decode_op(decisions[0])?;
    let mut links = Vec::with_capacity(LINK_COUNT);
    for node in 1..NODE_COUNT {
        let input = decisions[2 * node - 1];
        let op = decode_op(decisions[2 * node])?;
        links.push((input, op));
    }
    CellArchitecture::new(node0, links)
}
