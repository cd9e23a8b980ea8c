//! Sentence-pair models: a max-pooled BiRNN ("BLM") and a two-layer
//! cross-attention model ("ESIM"), each parameterized by interchangeable
//! recurrent cells — a standard LSTM, a searched cell genotype, or a random
//! genotype baseline.
//!
//! Dropout placement follows one scheme per model: variational dropout before
//! every recurrent layer; the two standard rates land after the RNN layer and
//! before the final projection (BLM), or after the enhancement layer and in
//! the final MLP (ESIM).

use crate::cell::{
    birnn, CellArchitecture, CellState, EnasCell, RecurrentCell, SharedCellParams,
};
use crate::data::{
    batch_mask, compute_metrics, embed_batch, EmbeddingProvider, LabelRange, MetricReport,
    PairExample, SentencePairDataset, TaskKind,
};
use crate::error::{Error, Result};
use crate::tensor::{
    DropoutKind, Graph, LossKind, LossTarget, ParamId, ParamStore, Tensor, TensorId,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---- LSTM baseline cell ----

/// Standard 4-gate LSTM parameters in block layout (`[.., 4*hidden]`,
/// gate order input, forget, candidate, output).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCellParams {
    input_dim: usize,
    hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
}

impl LstmCellParams {
    /// Registers weights uniform in `[-0.08, 0.08]`; the forget-gate bias
    /// block starts at 1.0, everything else at 0.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        const SCALE: f64 = 0.08;
        let w_x = store.register(
            &format!("{prefix}w_x"),
            Tensor::rand_uniform(vec![input_dim, 4 * hidden], -SCALE, SCALE, rng),
        )?;
        let w_h = store.register(
            &format!("{prefix}w_h"),
            Tensor::rand_uniform(vec![hidden, 4 * hidden], -SCALE, SCALE, rng),
        )?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let bias = store.register(&format!("{prefix}bias"), Tensor::from_vec(vec![4 * hidden], b)?)?;
        Ok(LstmCellParams {
            input_dim,
            hidden,
            w_x,
            w_h,
            bias,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// One LSTM step: gates from `x_t` and `h_prev`, returning `(h_t, c_t)`.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    params: &LstmCellParams,
    x_t: TensorId,
    h_prev: TensorId,
    c_prev: TensorId,
) -> Result<(TensorId, TensorId)> {
    let xs = g.shape_of(x_t).to_vec();
    if xs.len() != 2 || xs[1] != params.input_dim {
        return Err(Error::shape(
            "lstm_step",
            format!("x {xs:?} vs input_dim {}", params.input_dim),
        ));
    }
    let batch = xs[0];
    let h = params.hidden;
    let w_x = g.param(store, params.w_x)?;
    let w_h = g.param(store, params.w_h)?;
    let bias = g.param(store, params.bias)?;
    let zx = g.matmul(x_t, w_x)?;
    let zh = g.matmul(h_prev, w_h)?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, bias)?;
    // split the [batch, 4h] block into per-gate [batch, h] slices
    let z4 = g.reshape(z, vec![batch, 4, h])?;
    let i_pre = g.slice_time(z4, 0)?;
    let f_pre = g.slice_time(z4, 1)?;
    let g_pre = g.slice_time(z4, 2)?;
    let o_pre = g.slice_time(z4, 3)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(g_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c_t = g.add(keep, write)?;
    let c_act = g.tanh(c_t)?;
    let h_t = g.mul(o, c_act)?;
    Ok((h_t, c_t))
}

/// LSTM as a [`RecurrentCell`]; the cell state rides in the `extra` slot.
#[derive(Debug, Clone)]
pub struct LstmCell {
    params: LstmCellParams,
}

impl LstmCell {
    pub fn new(params: LstmCellParams) -> Self {
        LstmCell { params }
    }
}

impl RecurrentCell for LstmCell {
    fn input_dim(&self) -> usize {
        self.params.input_dim
    }

    fn hidden_dim(&self) -> usize {
        self.params.hidden
    }

    fn zero_state(&self, g: &mut Graph, batch: usize) -> Result<CellState> {
        let h = g.constant(Tensor::zeros(vec![batch, self.params.hidden]))?;
        let c = g.constant(Tensor::zeros(vec![batch, self.params.hidden]))?;
        Ok(CellState { h, extra: Some(c) })
    }

    fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: TensorId,
        state: &CellState,
    ) -> Result<CellState> {
        let c_prev = state
            .extra
            .ok_or_else(|| Error::InvalidArgument("LSTM state lost its cell slot".into()))?;
        let (h, c) = lstm_step(g, store, &self.params, x_t, state.h, c_prev)?;
        Ok(CellState { h, extra: Some(c) })
    }
}

// ---- model specification ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Blm,
    Esim,
}

impl ModelKind {
    pub fn layer_count(self) -> usize {
        match self {
            ModelKind::Blm => 1,
            ModelKind::Esim => 2,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Blm => write!(f, "BLM"),
            ModelKind::Esim => write!(f, "ESIM"),
        }
    }
}

/// What powers one recurrent layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    /// A genotype found by the search.
    Enas(CellArchitecture),
    /// A genotype sampled blindly; identical execution, different provenance.
    Random(CellArchitecture),
}

impl CellKind {
    pub fn arch(&self) -> Option<&CellArchitecture> {
        match self {
            CellKind::Lstm => None,
            CellKind::Enas(a) | CellKind::Random(a) => Some(a),
        }
    }

    /// Report notation: L, E, or RND.
    pub fn notation(&self) -> &'static str {
        match self {
            CellKind::Lstm => "L",
            CellKind::Enas(_) => "E",
            CellKind::Random(_) => "RND",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// One entry per recurrent layer.
    pub cells: Vec<CellKind>,
    /// Hidden size per recurrent layer (per direction).
    pub hidden: Vec<usize>,
    pub task: TaskKind,
    /// Standard dropout pair; placement depends on the model kind.
    pub dropout: (f64, f64),
    /// Applied before every recurrent layer, one mask per sequence.
    pub variational_dropout: f64,
    /// Highway gating inside genotype cells.
    pub highway: bool,
    /// Feedforward width; defaults to half the joint-feature width.
    pub ff_hidden: Option<usize>,
    /// Clamp regression predictions to the label range at inference.
    pub clamp_predictions: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let layers = self.kind.layer_count();
        if self.cells.len() != layers || self.hidden.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{} needs exactly {layers} recurrent layer(s), got {} cells / {} hidden sizes",
                self.kind,
                self.cells.len(),
                self.hidden.len()
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden sizes must be positive".into()));
        }
        for rate in [self.dropout.0, self.dropout.1, self.variational_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::DropoutRate(rate));
            }
        }
        Ok(())
    }

    /// Report notation like `L`, `E`, or `E/L`.
    pub fn cell_notation(&self) -> String {
        self.cells
            .iter()
            .map(CellKind::notation)
            .collect::<Vec<_>>()
            .join("/")
    }

    fn output_width(&self) -> usize {
        match self.task {
            TaskKind::Classification => 2,
            TaskKind::Regression => 1,
        }
    }
}

// ---- batches ----

/// A batch of sentence pairs ready for a forward pass.
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    pub a: Vec<&'a [String]>,
    pub b: Vec<&'a [String]>,
    pub labels: Vec<f64>,
}

impl<'a> PairBatch<'a> {
    pub fn new(examples: impl IntoIterator<Item = &'a PairExample>) -> Self {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut labels = Vec::new();
        for ex in examples {
            a.push(ex.tokens_a.as_slice());
            b.push(ex.tokens_b.as_slice());
            labels.push(ex.label);
        }
        PairBatch { a, b, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

// ---- shared building blocks ----

/// `[s1; s2; |s1 - s2|; s1 ⊙ s2]` over pooled sentence vectors.
pub fn joint_pair_features(g: &mut Graph, s1: TensorId, s2: TensorId) -> Result<TensorId> {
    let diff = g.sub(s1, s2)?;
    let absdiff = g.abs(diff)?;
    let prod = g.mul(s1, s2)?;
    g.concat_last(&[s1, s2, absdiff, prod])
}

/// `[x; x̃; x - x̃; x ⊙ x̃]` over aligned sequences.
pub fn enhance(g: &mut Graph, x: TensorId, x_tilde: TensorId) -> Result<TensorId> {
    let diff = g.sub(x, x_tilde)?;
    let prod = g.mul(x, x_tilde)?;
    g.concat_last(&[x, x_tilde, diff, prod])
}

/// Soft alignments between two encoded sentences.
pub struct CrossAttention {
    /// `[batch, time_a, dim]`: b-states summarized for each a position.
    pub a_tilde: TensorId,
    pub b_tilde: TensorId,
    /// `[batch, time_a, time_b]` rows summing to 1 over valid b positions.
    pub attn_a_over_b: TensorId,
    pub attn_b_over_a: TensorId,
}

/// Dot-product cross attention with masked normalization.
pub fn cross_attention(
    g: &mut Graph,
    a_states: TensorId,
    b_states: TensorId,
    mask_a: &Tensor,
    mask_b: &Tensor,
) -> Result<CrossAttention> {
    let sa = g.shape_of(a_states).to_vec();
    let sb = g.shape_of(b_states).to_vec();
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::shape(
            "cross_attention",
            format!("{sa:?} against {sb:?}"),
        ));
    }
    let (batch, ta, tb) = (sa[0], sa[1], sb[1]);
    // tile the opposite sentence's mask across this sentence's positions
    let tile = |mask: &Tensor, copies: usize, len: usize| -> Result<Tensor> {
        let mut data = vec![0.0; batch * copies * len];
        for bi in 0..batch {
            let row = &mask.data()[bi * len..(bi + 1) * len];
            for c in 0..copies {
                data[(bi * copies + c) * len..(bi * copies + c) * len + len].copy_from_slice(row);
            }
        }
        Tensor::from_vec(vec![batch, copies, len], data)
    };
    let e_ab = g.bmm_nt(a_states, b_states)?; // [batch, ta, tb]
    let mb = g.constant(tile(mask_b, ta, tb)?)?;
    let attn_a_over_b = g.softmax(e_ab, 2, Some(mb))?;
    let a_tilde = g.bmm(attn_a_over_b, b_states)?;

    let e_ba = g.bmm_nt(b_states, a_states)?; // [batch, tb, ta]
    let ma = g.constant(tile(mask_a, tb, ta)?)?;
    let attn_b_over_a = g.softmax(e_ba, 2, Some(ma))?;
    let b_tilde = g.bmm(attn_b_over_a, a_states)?;

    Ok(CrossAttention {
        a_tilde,
        b_tilde,
        attn_a_over_b,
        attn_b_over_a,
    })
}

// ---- the model ----

#[derive(Debug, Clone, Serialize, Deserialize)]
enum LayerBank {
    Lstm {
        fwd: LstmCellParams,
        bwd: LstmCellParams,
    },
    Genotype {
        fwd: SharedCellParams,
        bwd: SharedCellParams,
        arch: CellArchitecture,
    },
}

/// Feedforward + projection head.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Head {
    ff_w: ParamId,
    ff_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Head {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        const SCALE: f64 = 0.08;
        Ok(Head {
            ff_w: store.register(
                &format!("{prefix}ff_w"),
                Tensor::rand_uniform(vec![input, hidden], -SCALE, SCALE, rng),
            )?,
            ff_b: store.register(&format!("{prefix}ff_b"), Tensor::zeros(vec![hidden]))?,
            out_w: store.register(
                &format!("{prefix}out_w"),
                Tensor::rand_uniform(vec![hidden, output], -SCALE, SCALE, rng),
            )?,
            out_b: store.register(&format!("{prefix}out_b"), Tensor::zeros(vec![output]))?,
        })
    }

    fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: TensorId,
        dropout_rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let w = g.param(store, self.ff_w)?;
        let b = g.param(store, self.ff_b)?;
        let h = g.matmul(input, w)?;
        let h = g.add_bias(h, b)?;
        let h = g.relu(h)?;
        let h = g.dropout(DropoutKind::Standard, h, dropout_rate, training, rng)?;
        let w = g.param(store, self.out_w)?;
        let b = g.param(store, self.out_b)?;
        let out = g.matmul(h, w)?;
        g.add_bias(out, b)
    }
}

/// A built sentence-pair model: a spec plus its registered parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentPairModel {
    pub spec: ModelSpec,
    layers: Vec<LayerBank>,
    /// ESIM only: maps enhanced layer-1 features back to layer-2 input width.
    projection: Option<(ParamId, ParamId)>,
    head: Head,
    /// Present when the provider mixes layers.
    pub mix_logits: Option<ParamId>,
}

impl SentPairModel {
    /// Registers every parameter for `spec` under `prefix`.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        spec: ModelSpec,
        provider: &EmbeddingProvider,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let embed_dim = provider.dim();
        let mix_logits = match provider {
            EmbeddingProvider::MultiLayer(m) => {
                Some(m.register_mix_logits(store, &format!("{prefix}mix_logits"))?)
            }
            _ => None,
        };
        let mut layers = Vec::with_capacity(spec.cells.len());
        for (i, cell) in spec.cells.iter().enumerate() {
            let input_dim = if i == 0 { embed_dim } else { spec.hidden[i] };
            let hidden = spec.hidden[i];
            let bank = match cell {
                CellKind::Lstm => LayerBank::Lstm {
                    fwd: LstmCellParams::init(store, &format!("{prefix}l{i}.fwd."), input_dim, hidden, rng)?,
                    bwd: LstmCellParams::init(store, &format!("{prefix}l{i}.bwd."), input_dim, hidden, rng)?,
                },
                CellKind::Enas(arch) | CellKind::Random(arch) => LayerBank::Genotype {
                    fwd: SharedCellParams::init(
                        store,
                        &format!("{prefix}l{i}.fwd."),
                        input_dim,
                        hidden,
                        spec.highway,
                        rng,
                    )?,
                    bwd: SharedCellParams::init(
                        store,
                        &format!("{prefix}l{i}.bwd."),
                        input_dim,
                        hidden,
                        spec.highway,
                        rng,
                    )?,
                    arch: arch.clone(),
                },
            };
            layers.push(bank);
        }
        let projection = match spec.kind {
            ModelKind::Blm => None,
            ModelKind::Esim => {
                const SCALE: f64 = 0.08;
                let enhanced = 8 * spec.hidden[0];
                let w = store.register(
                    &format!("{prefix}proj_w"),
                    Tensor::rand_uniform(vec![enhanced, spec.hidden[1]], -SCALE, SCALE, rng),
                )?;
                let b = store.register(&format!("{prefix}proj_b"), Tensor::zeros(vec![spec.hidden[1]]))?;
                Some((w, b))
            }
        };
        let joint = 8 * *spec.hidden.last().expect("validated");
        let ff_hidden = spec.ff_hidden.unwrap_or(joint / 2).max(1);
        let head = Head::init(
            store,
            &format!("{prefix}head."),
            joint,
            ff_hidden,
            spec.output_width(),
            rng,
        )?;
        Ok(SentPairModel {
            spec,
            layers,
            projection,
            head,
            mix_logits,
        })
    }

    /// Fresh parameters for an identical spec elsewhere in the store.
    pub fn reinit(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        provider: &EmbeddingProvider,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        SentPairModel::build(store, prefix, self.spec.clone(), provider, rng)
    }

    fn layer_cells(
        &self,
        layer: usize,
        arch_override: Option<&CellArchitecture>,
    ) -> Result<(Box<dyn RecurrentCell>, Box<dyn RecurrentCell>)> {
        Ok(match &self.layers[layer] {
            LayerBank::Lstm { fwd, bwd } => (
                Box::new(LstmCell::new(fwd.clone())),
                Box::new(LstmCell::new(bwd.clone())),
            ),
            LayerBank::Genotype { fwd, bwd, arch } => {
                let arch = arch_override.unwrap_or(arch);
                (
                    Box::new(EnasCell::new(fwd.clone(), arch, self.spec.highway)?),
                    Box::new(EnasCell::new(bwd.clone(), arch, self.spec.highway)?),
                )
            }
        })
    }

    fn run_birnn_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        inputs: TensorId,
        mask: &Tensor,
        arch_override: Option<&CellArchitecture>,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let dropped = g.dropout(
            DropoutKind::Variational,
            inputs,
            self.spec.variational_dropout,
            training,
            rng,
        )?;
        let (fwd, bwd) = self.layer_cells(layer, arch_override)?;
        birnn(g, store, fwd.as_ref(), bwd.as_ref(), dropped, mask)
    }

    /// Builds the forward graph for one batch and returns predictions:
    /// `[batch, 2]` logits for classification, `[batch]` for regression.
    /// `arch_override` swaps the genotype of every searched layer, which is
    /// how weight-sharing evaluates a fresh architecture per minibatch.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        provider: &EmbeddingProvider,
        batch: &PairBatch,
        training: bool,
        rng: &mut impl Rng,
        arch_override: Option<&CellArchitecture>,
    ) -> Result<TensorId> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mask_a = batch_mask(&batch.a)?;
        let mask_b = batch_mask(&batch.b)?;
        let ea = embed_batch(g, store, provider, self.mix_logits, &batch.a, None)?;
        let eb = embed_batch(g, store, provider, self.mix_logits, &batch.b, None)?;

        let joint = match self.spec.kind {
            ModelKind::Blm => {
                let d1 = self.spec.dropout.0;
                let mut pooled = Vec::with_capacity(2);
                for (emb, mask) in [(ea, &mask_a), (eb, &mask_b)] {
                    let states =
                        self.run_birnn_layer(g, store, 0, emb.inputs, mask, arch_override, training, rng)?;
                    let states = g.dropout(DropoutKind::Standard, states, d1, training, rng)?;
                    let mask_id = g.constant(mask.clone())?;
                    pooled.push(g.masked_max(states, 1, Some(mask_id))?);
                }
                joint_pair_features(g, pooled[0], pooled[1])?
            }
            ModelKind::Esim => {
                let d1 = self.spec.dropout.0;
                let a1 =
                    self.run_birnn_layer(g, store, 0, ea.inputs, &mask_a, arch_override, training, rng)?;
                let b1 =
                    self.run_birnn_layer(g, store, 0, eb.inputs, &mask_b, arch_override, training, rng)?;
                let att = cross_attention(g, a1, b1, &mask_a, &mask_b)?;
                let ea2 = enhance(g, a1, att.a_tilde)?;
                let eb2 = enhance(g, b1, att.b_tilde)?;
                let (proj_w, proj_b) = self.projection.expect("ESIM has a projection");
                let mut pooled = Vec::with_capacity(4);
                for (enhanced, mask) in [(ea2, &mask_a), (eb2, &mask_b)] {
                    let enhanced = g.dropout(DropoutKind::Standard, enhanced, d1, training, rng)?;
                    let shape = g.shape_of(enhanced).to_vec();
                    let (bsz, t, feat) = (shape[0], shape[1], shape[2]);
                    let flat = g.reshape(enhanced, vec![bsz * t, feat])?;
                    let w = g.param(store, proj_w)?;
                    let b = g.param(store, proj_b)?;
                    let proj = g.matmul(flat, w)?;
                    let proj = g.add_bias(proj, b)?;
                    let proj = g.relu(proj)?;
                    let proj = g.reshape(proj, vec![bsz, t, self.spec.hidden[1]])?;
                    let states =
                        self.run_birnn_layer(g, store, 1, proj, mask, arch_override, training, rng)?;
                    let mask_id = g.constant(mask.clone())?;
                    pooled.push(g.masked_mean(states, 1, Some(mask_id))?);
                    pooled.push(g.masked_max(states, 1, Some(mask_id))?);
                }
                // [s1_avg; s1_max; s2_avg; s2_max]
                g.concat_last(&pooled)?
            }
        };

        let preds = self
            .head
            .apply(g, store, joint, self.spec.dropout.1, training, rng)?;
        match self.spec.task {
            TaskKind::Classification => Ok(preds),
            TaskKind::Regression => {
                let b = batch.len();
                g.reshape(preds, vec![b])
            }
        }
    }

    /// Training loss for one forward pass.
    pub fn loss(
        &self,
        g: &mut Graph,
        predictions: TensorId,
        batch: &PairBatch,
        regression_loss: LossKind,
    ) -> Result<TensorId> {
        match self.spec.task {
            TaskKind::Classification => g.loss(
                LossKind::CrossEntropy,
                predictions,
                &LossTarget::Classes(batch.classes()),
            ),
            TaskKind::Regression => {
                if regression_loss == LossKind::CrossEntropy {
                    return Err(Error::InvalidArgument(
                        "regression tasks need mse or mae".into(),
                    ));
                }
                g.loss(regression_loss, predictions, &LossTarget::Values(batch.labels.clone()))
            }
        }
    }

    /// Reads scalar predictions out of a forward pass: argmax class for
    /// classification, the raw (optionally clamped) value for regression.
    pub fn extract_predictions(
        &self,
        g: &Graph,
        predictions: TensorId,
        label_range: LabelRange,
    ) -> Vec<f64> {
        let v = g.value(predictions);
        match self.spec.task {
            TaskKind::Classification => v
                .data()
                .chunks(2)
                .map(|row| if row[1] > row[0] { 1.0 } else { 0.0 })
                .collect(),
            TaskKind::Regression => v
                .data()
                .iter()
                .map(|&p| {
                    if self.spec.clamp_predictions {
                        p.clamp(label_range.min, label_range.max)
                    } else {
                        p
                    }
                })
                .collect(),
        }
    }

    /// Evaluation-mode predictions over a whole dataset, optionally swapping
    /// the genotype of every searched layer.
    pub fn predict_with(
        &self,
        store: &ParamStore,
        provider: &EmbeddingProvider,
        data: &SentencePairDataset,
        batch_size: usize,
        arch_override: Option<&CellArchitecture>,
    ) -> Result<Vec<f64>> {
        use rand::SeedableRng;
        // eval mode ignores the rng, but the signature needs one
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.examples.chunks(batch_size.max(1)) {
            let batch = PairBatch::new(chunk);
            let mut g = Graph::new();
            let preds =
                self.forward(&mut g, store, provider, &batch, false, &mut rng, arch_override)?;
            out.extend(self.extract_predictions(&g, preds, data.label_range));
        }
        Ok(out)
    }

    /// Evaluation-mode predictions over a whole dataset.
    pub fn predict(
        &self,
        store: &ParamStore,
        provider: &EmbeddingProvider,
        data: &SentencePairDataset,
        batch_size: usize,
    ) -> Result<Vec<f64>> {
        self.predict_with(store, provider, data, batch_size, None)
    }

    /// Task metric over a dataset: accuracy for classification, Pearson for
    /// regression (0 with a flag when predictions are constant).
    pub fn predict_and_score_with(
        &self,
        store: &ParamStore,
        provider: &EmbeddingProvider,
        data: &SentencePairDataset,
        batch_size: usize,
        arch_override: Option<&CellArchitecture>,
    ) -> Result<MetricReport> {
        let preds = self.predict_with(store, provider, data, batch_size, arch_override)?;
        let golds: Vec<f64> = data.examples.iter().map(|e| e.label).collect();
        compute_metrics(self.spec.task, &preds, &golds)
    }

    /// Task metric with the model's own architecture.
    pub fn predict_and_score(
        &self,
        store: &ParamStore,
        provider: &EmbeddingProvider,
        data: &SentencePairDataset,
        batch_size: usize,
    ) -> Result<MetricReport> {
        self.predict_and_score_with(store, provider, data, batch_size, None)
    }
}
