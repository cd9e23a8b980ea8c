//! Sentence-pair datasets, embedding providers, and evaluation metrics.
//!
//! Datasets hold whitespace-tokenized sentence pairs with a scalar label;
//! classification labels are the exact values 0 or 1, regression labels live
//! in a declared range. Embedding providers are frozen lookups — the one
//! trainable piece is the per-layer mixing weights of the multi-layer
//! provider, softmax-normalized inside the compute graph.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Classification => write!(f, "classification"),
            TaskKind::Regression => write!(f, "regression"),
        }
    }
}

/// Inclusive label bounds. Classification uses `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRange {
    pub min: f64,
    pub max: f64,
}

impl LabelRange {
    pub const BINARY: LabelRange = LabelRange { min: 0.0, max: 1.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) {
            return Err(Error::InvalidArgument(format!(
                "label range [{min}, {max}] is empty"
            )));
        }
        Ok(LabelRange { min, max })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// One tokenized sentence pair with its gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub tokens_a: Vec<String>,
    pub tokens_b: Vec<String>,
    pub label: f64,
}

impl PairExample {
    /// Classification gold as a class index.
    pub fn class(&self) -> usize {
        self.label as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentencePairDataset {
    pub name: String,
    pub task: TaskKind,
    pub label_range: LabelRange,
    pub examples: Vec<PairExample>,
}

impl SentencePairDataset {
    pub fn new(
        name: impl Into<String>,
        task: TaskKind,
        label_range: LabelRange,
        examples: Vec<PairExample>,
    ) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            validate_example(task, label_range, ex).map_err(|e| {
                Error::Dataset(format!("example {i}: {e}"))
            })?;
        }
        Ok(SentencePairDataset {
            name: name.into(),
            task,
            label_range,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Deterministic shuffled split into (train, dev). The dev share is
    /// rounded to the nearest example and clamped so both sides are
    /// non-empty.
    pub fn split(&self, dev_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&dev_fraction) || dev_fraction == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "dev fraction {dev_fraction} must be in (0, 1)"
            )));
        }
        if self.len() < 2 {
            return Err(Error::Dataset(format!(
                "{} has {} examples; need at least 2 to split",
                self.name,
                self.len()
            )));
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let dev_n = ((self.len() as f64 * dev_fraction).round() as usize).clamp(1, self.len() - 1);
        let pick = |idxs: &[usize]| SentencePairDataset {
            name: self.name.clone(),
            task: self.task,
            label_range: self.label_range,
            examples: idxs.iter().map(|&i| self.examples[i].clone()).collect(),
        };
        let dev = pick(&indices[..dev_n]);
        let train = pick(&indices[dev_n..]);
        Ok((train, dev))
    }
}

fn validate_example(task: TaskKind, range: LabelRange, ex: &PairExample) -> Result<()> {
    if ex.tokens_a.is_empty() || ex.tokens_b.is_empty() {
        return Err(Error::Dataset("empty sentence".into()));
    }
    match task {
        TaskKind::Classification => {
            if ex.label != 0.0 && ex.label != 1.0 {
                return Err(Error::Dataset(format!(
                    "classification label must be 0 or 1, got {}",
                    ex.label
                )));
            }
        }
        TaskKind::Regression => {
            if !range.contains(ex.label) {
                return Err(Error::Dataset(format!(
                    "label {} outside [{}, {}]",
                    ex.label, range.min, range.max
                )));
            }
        }
    }
    Ok(())
}

/// Per-dataset loader settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub task: TaskKind,
    pub label_range: LabelRange,
    /// Sentences are truncated to this many tokens.
    pub token_cap: usize,
    pub has_header: bool,
}

/// Loads a `sentence1<TAB>sentence2<TAB>label` file, tokenizing on
/// whitespace and truncating to the configured cap. Errors carry the
/// 1-based line number.
pub fn load_tsv(path: &Path, config: &DatasetConfig) -> Result<SentencePairDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let skip = usize::from(config.has_header);
    for (lineno, line) in text.lines().enumerate().skip(skip) {
        if line.trim().is_empty() {
            continue;
        }
        let located = |msg: String| Error::Dataset(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(located(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let label: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| located(format!("bad label {:?}", fields[2])))?;
        let ex = PairExample {
            tokens_a: tokenize(fields[0], config.token_cap),
            tokens_b: tokenize(fields[1], config.token_cap),
            label,
        };
        validate_example(config.task, config.label_range, &ex).map_err(|e| located(e.to_string()))?;
        examples.push(ex);
    }
    SentencePairDataset::new(config.name.clone(), config.task, config.label_range, examples)
}

fn tokenize(text: &str, cap: usize) -> Vec<String> {
    text.split_whitespace().take(cap.max(1)).map(str::to_string).collect()
}

// ---- synthetic tasks ----

const SYNTH_VOCAB: usize = 24;
const SYNTH_MIN_LEN: usize = 4;
const SYNTH_MAX_LEN: usize = 9;

fn synth_token(i: usize) -> String {
    format!("w{i:02}")
}

/// Regression gold: Jaccard overlap of token *sets*, mapped into the range.
pub fn regression_label(tokens_a: &[String], tokens_b: &[String], range: LabelRange) -> f64 {
    let a: BTreeSet<&str> = tokens_a.iter().map(String::as_str).collect();
    let b: BTreeSet<&str> = tokens_b.iter().map(String::as_str).collect();
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    let jaccard = if union == 0.0 { 0.0 } else { inter / union };
    range.min + jaccard * range.width()
}

/// Generates a desk-scale dataset with a learnable relation.
///
/// Classification: label 1 pairs are token-multiset permutations, label 0
/// pairs substitute exactly one token before shuffling; classes alternate so
/// the balance is exact. Regression: the label is the scaled Jaccard overlap
/// of the two token sets.
pub fn make_synthetic(task: TaskKind, n: usize, seed: u64) -> Result<SentencePairDataset> {
    if n < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic datasets need at least 8 examples, asked for {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.gen_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
        (0..len).map(|_| synth_token(rng.gen_range(0..SYNTH_VOCAB))).collect()
    };
    let mut examples = Vec::with_capacity(n);
    match task {
        TaskKind::Classification => {
            for i in 0..n {
                let a = sentence(&mut rng);
                let mut b = a.clone();
                let positive = i % 2 == 0;
                if !positive {
                    // swap one token for one not present in the sentence
                    let present: BTreeSet<&str> = a.iter().map(String::as_str).collect();
                    let replacement = (0..SYNTH_VOCAB)
                        .map(synth_token)
                        .find(|t| !present.contains(t.as_str()))
                        .expect("vocabulary larger than any sentence");
                    let pos = rng.gen_range(0..b.len());
                    b[pos] = replacement;
                }
                b.shuffle(&mut rng);
                examples.push(PairExample {
                    tokens_a: a,
                    tokens_b: b,
                    label: if positive { 1.0 } else { 0.0 },
                });
            }
            examples.shuffle(&mut rng);
            SentencePairDataset::new("synthetic-paraphrase", task, LabelRange::BINARY, examples)
        }
        TaskKind::Regression => {
            let range = LabelRange::new(0.0, 5.0)?;
            for _ in 0..n {
                let a = sentence(&mut rng);
                // keep a random prefix of a's tokens, then pad with fresh draws
                let keep = rng.gen_range(0..=a.len());
                let mut b: Vec<String> = a.iter().take(keep).cloned().collect();
                let target_len = rng.gen_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
                while b.len() < target_len {
                    b.push(synth_token(rng.gen_range(0..SYNTH_VOCAB)));
                }
                b.shuffle(&mut rng);
                let label = regression_label(&a, &b, range);
                examples.push(PairExample {
                    tokens_a: a,
                    tokens_b: b,
                    label,
                });
            }
            SentencePairDataset::new("synthetic-similarity", task, range, examples)
        }
    }
}

// ---- embeddings ----

/// Frozen token-to-vector table.
#[derive(Debug, Clone)]
pub struct StaticEmbeddings {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl StaticEmbeddings {
    pub fn new(dim: usize, table: HashMap<String, Vec<f64>>) -> Result<Self> {
        for (tok, v) in &table {
            if v.len() != dim {
                return Err(Error::Parse(format!(
                    "embedding for {tok:?} has {} values, expected {dim}",
                    v.len()
                )));
            }
        }
        Ok(StaticEmbeddings { dim, table })
    }

    /// Out-of-vocabulary tokens map to the zero vector.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        self.table.get(token).cloned().unwrap_or_else(|| vec![0.0; self.dim])
    }
}

/// How multi-layer records are keyed: by surface token (default) or by a
/// caller-supplied pair/position key for contextual vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKeying {
    Token,
    PairPosition,
}

/// Frozen per-layer tables mixed by trainable softmax weights.
#[derive(Debug, Clone)]
pub struct MultiLayerEmbeddings {
    dim: usize,
    layers: Vec<HashMap<String, Vec<f64>>>,
    keying: LayerKeying,
}

impl MultiLayerEmbeddings {
    pub fn new(
        dim: usize,
        layers: Vec<HashMap<String, Vec<f64>>>,
        keying: LayerKeying,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("need at least one embedding layer".into()));
        }
        for layer in &layers {
            for (tok, v) in layer {
                if v.len() != dim {
                    return Err(Error::Parse(format!(
                        "embedding for {tok:?} has {} values, expected {dim}",
                        v.len()
                    )));
                }
            }
        }
        Ok(MultiLayerEmbeddings { dim, layers, keying })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Registers the `[1, L]` mixing logits (zeros, i.e. a uniform mix).
    pub fn register_mix_logits(&self, store: &mut ParamStore, name: &str) -> Result<ParamId> {
        store.register(name, Tensor::zeros(vec![1, self.layer_count()]))
    }
}

/// Token vector source for batching.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Static(StaticEmbeddings),
    MultiLayer(MultiLayerEmbeddings),
    /// Deterministic pseudo-vectors derived from a stable token hash; the
    /// synthetic tasks' stand-in for a real embedding file.
    ToyHash { dim: usize },
}

impl EmbeddingProvider {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Static(s) => s.dim,
            EmbeddingProvider::MultiLayer(m) => m.dim,
            EmbeddingProvider::ToyHash { dim } => *dim,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// The toy-hash vector for one token.
pub fn toy_hash_vector(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// One sentence side of a batch, ready for a recurrent encoder.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedBatch {
    /// `[batch, time, dim]` in-graph (constant except the multi-layer mix).
    pub inputs: TensorId,
    pub batch: usize,
    pub time: usize,
}

/// Pads sentences to the longest one and returns the 0/1 validity mask.
pub fn batch_mask(sentences: &[&[String]]) -> Result<Tensor> {
    let time = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
    if sentences.is_empty() || time == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut mask = vec![0.0; sentences.len() * time];
    for (b, s) in sentences.iter().enumerate() {
        mask[b * time..b * time + s.len()].fill(1.0);
    }
    Tensor::from_vec(vec![sentences.len(), time], mask)
}

/// Embeds one side of a batch. `mix_logits` is required for (and only for)
/// the multi-layer provider; `pair_keys` supplies per-sentence key prefixes
/// when the provider keys on pair/position (`prefix#position`).
pub fn embed_batch(
    g: &mut Graph,
    store: &ParamStore,
    provider: &EmbeddingProvider,
    mix_logits: Option<ParamId>,
    sentences: &[&[String]],
    pair_keys: Option<&[String]>,
) -> Result<EmbeddedBatch> {
    let time = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
    if sentences.is_empty() || time == 0 {
        return Err(Error::EmptyBatch);
    }
    let (batch, dim) = (sentences.len(), provider.dim());
    let fill = |table: &mut Vec<f64>, b: usize, t: usize, v: &[f64]| {
        table[(b * time + t) * dim..(b * time + t) * dim + dim].copy_from_slice(v);
    };
    let key_for = |b: usize, t: usize, token: &str, keying: LayerKeying| -> Result<String> {
        match keying {
            LayerKeying::Token => Ok(token.to_string()),
            LayerKeying::PairPosition => {
                let keys = pair_keys.ok_or_else(|| {
                    Error::InvalidArgument("pair/position keying needs pair_keys".into())
                })?;
                Ok(format!("{}#{t}", keys[b]))
            }
        }
    };
    let inputs = match provider {
        EmbeddingProvider::Static(emb) => {
            let mut data = vec![0.0; batch * time * dim];
            for (b, s) in sentences.iter().enumerate() {
                for (t, tok) in s.iter().enumerate() {
                    fill(&mut data, b, t, &emb.lookup(tok));
                }
            }
            g.constant(Tensor::from_vec(vec![batch, time, dim], data)?)?
        }
        EmbeddingProvider::ToyHash { dim: d } => {
            let mut data = vec![0.0; batch * time * dim];
            for (b, s) in sentences.iter().enumerate() {
                for (t, tok) in s.iter().enumerate() {
                    fill(&mut data, b, t, &toy_hash_vector(tok, *d));
                }
            }
            g.constant(Tensor::from_vec(vec![batch, time, dim], data)?)?
        }
        EmbeddingProvider::MultiLayer(emb) => {
            let logits = mix_logits.ok_or_else(|| {
                Error::InvalidArgument("multi-layer embeddings need mixing logits".into())
            })?;
            let l_count = emb.layer_count();
            if store.value(logits).shape() != [1, l_count] {
                return Err(Error::shape(
                    "embed_batch",
                    format!("mix logits must be [1, {l_count}]"),
                ));
            }
            // rows of `stacked` are flattened per-layer embeddings; softmax
            // weights [1, L] x [L, b*t*d] mixes them in one matmul
            let mut stacked = vec![0.0; l_count * batch * time * dim];
            for (l, layer) in emb.layers.iter().enumerate() {
                let data = &mut stacked[l * batch * time * dim..(l + 1) * batch * time * dim];
                let mut tmp = vec![0.0; batch * time * dim];
                for (b, s) in sentences.iter().enumerate() {
                    for (t, tok) in s.iter().enumerate() {
                        let key = key_for(b, t, tok, emb.keying)?;
                        let zero = vec![0.0; dim];
                        let v = layer.get(&key).unwrap_or(&zero);
                        fill(&mut tmp, b, t, v);
                    }
                }
                data.copy_from_slice(&tmp);
            }
            let layers_id =
                g.constant(Tensor::from_vec(vec![l_count, batch * time * dim], stacked)?)?;
            let logits_id = g.param(store, logits)?;
            let weights = g.softmax(logits_id, 1, None)?;
            let mixed = g.matmul(weights, layers_id)?;
            g.reshape(mixed, vec![batch, time, dim])?
        }
    };
    Ok(EmbeddedBatch { inputs, batch, time })
}

/// Pure fixed-weight mix of a multi-layer provider (no graph); the oracle the
/// softmax-mixed path is tested against.
pub fn embed_multilayer_fixed(
    emb: &MultiLayerEmbeddings,
    weights: &[f64],
    sentences: &[&[String]],
    pair_keys: Option<&[String]>,
) -> Result<Tensor> {
    if weights.len() != emb.layer_count() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} layers",
            weights.len(),
            emb.layer_count()
        )));
    }
    let time = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
    if sentences.is_empty() || time == 0 {
        return Err(Error::EmptyBatch);
    }
    let (batch, dim) = (sentences.len(), emb.dim);
    let mut data = vec![0.0; batch * time * dim];
    for (b, s) in sentences.iter().enumerate() {
        for (t, tok) in s.iter().enumerate() {
            for (l, layer) in emb.layers.iter().enumerate() {
                let key = match emb.keying {
                    LayerKeying::Token => tok.clone(),
                    LayerKeying::PairPosition => {
                        let keys = pair_keys.ok_or_else(|| {
                            Error::InvalidArgument("pair/position keying needs pair_keys".into())
                        })?;
                        format!("{}#{t}", keys[b])
                    }
                };
                if let Some(v) = layer.get(&key) {
                    for d in 0..dim {
                        data[(b * time + t) * dim + d] += weights[l] * v[d];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![batch, time, dim], data)
}

/// Parses `token v1 v2 ...` lines into a static table.
pub fn load_embeddings_text(path: &Path) -> Result<StaticEmbeddings> {
    let text = std::fs::read_to_string(path)?;
    let mut dim = None;
    let mut table = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap().to_string();
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse().map_err(|_| {
                    Error::Parse(format!("{}:{}: bad float {f:?}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse(format!(
                    "{}:{}: dimension {} != {}",
                    path.display(),
                    lineno + 1,
                    values.len(),
                    d
                )))
            }
            _ => {}
        }
        table.insert(token, values);
    }
    let dim = dim.ok_or_else(|| Error::Parse(format!("{}: no embeddings", path.display())))?;
    StaticEmbeddings::new(dim, table)
}

/// Parses `token layer v1 v2 ...` lines into per-layer tables.
pub fn load_multilayer_text(path: &Path, keying: LayerKeying) -> Result<MultiLayerEmbeddings> {
    let text = std::fs::read_to_string(path)?;
    let mut dim = None;
    let mut layers: Vec<HashMap<String, Vec<f64>>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let located = |msg: String| Error::Parse(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let mut fields = line.split_whitespace();
        let token = fields.next().unwrap().to_string();
        let layer: usize = fields
            .next()
            .ok_or_else(|| located("missing layer index".into()))?
            .parse()
            .map_err(|_| located("bad layer index".into()))?;
        let values: Vec<f64> = fields
            .map(|f| f.parse().map_err(|_| located(format!("bad float {f:?}"))))
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(located(format!("dimension {} != {d}", values.len())))
            }
            _ => {}
        }
        while layers.len() <= layer {
            layers.push(HashMap::new());
        }
        layers[layer].insert(token, values);
    }
    let dim = dim.ok_or_else(|| Error::Parse(format!("{}: no embeddings", path.display())))?;
    MultiLayerEmbeddings::new(dim, layers, keying)
}

// ---- metrics ----

/// Pearson correlation; `degenerate` marks a zero-variance input, reported
/// as a 0.0 score rather than an error so sweeps can keep moving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "pearson over {} vs {} points",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(PearsonResult {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(PearsonResult {
        value: sxy / (sxx * syy).sqrt(),
        degenerate: false,
    })
}

pub fn accuracy(pred_classes: &[usize], gold_classes: &[usize]) -> Result<f64> {
    if pred_classes.len() != gold_classes.len() || pred_classes.is_empty() {
        return Err(Error::InvalidArgument("accuracy needs matched non-empty inputs".into()));
    }
    let hits = pred_classes
        .iter()
        .zip(gold_classes)
        .filter(|(p, g)| p == g)
        .count();
    Ok(hits as f64 / pred_classes.len() as f64)
}

/// Binary F1 for the positive class (1); degenerate denominators give 0.
pub fn f1_binary(pred_classes: &[usize], gold_classes: &[usize]) -> Result<f64> {
    if pred_classes.len() != gold_classes.len() || pred_classes.is_empty() {
        return Err(Error::InvalidArgument("f1 needs matched non-empty inputs".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &g) in pred_classes.iter().zip(gold_classes) {
        match (p, g) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Task-appropriate scores for one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Accuracy for classification, Pearson for regression.
    pub primary: f64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub pearson: Option<f64>,
    pub pearson_degenerate: bool,
}

/// Scores raw model outputs: class indices against integer golds for
/// classification, real values against gold scores for regression.
pub fn compute_metrics(task: TaskKind, predictions: &[f64], golds: &[f64]) -> Result<MetricReport> {
    match task {
        TaskKind::Classification => {
            let pred: Vec<usize> = predictions.iter().map(|&p| p as usize).collect();
            let gold: Vec<usize> = golds.iter().map(|&g| g as usize).collect();
            let acc = accuracy(&pred, &gold)?;
            let f1 = f1_binary(&pred, &gold)?;
            Ok(MetricReport {
                primary: acc,
                accuracy: Some(acc),
                f1: Some(f1),
                pearson: None,
                pearson_degenerate: false,
            })
        }
        TaskKind::Regression => {
            let r = pearson(predictions, golds)?;
            Ok(MetricReport {
                primary: r.value,
                accuracy: None,
                f1: None,
                pearson: Some(r.value),
                pearson_degenerate: r.degenerate,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("cellsearch-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn toy_config(task: TaskKind, range: LabelRange) -> DatasetConfig {
        DatasetConfig {
            name: "toy".into(),
            task,
            label_range: range,
            token_cap: 64,
            has_header: false,
        }
    }

    #[test]
    fn loads_a_three_row_file() {
        let path = write_temp(
            "three.tsv",
            "a b c\td e\t1\nx y\tz w\t0\nhello there\tgeneral greeting\t1\n",
        );
        let ds = load_tsv(&path, &toy_config(TaskKind::Classification, LabelRange::BINARY)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.examples[0].tokens_a, vec!["a", "b", "c"]);
        assert_eq!(ds.examples[0].label, 1.0);
    }

    #[test]
    fn header_flag_skips_first_line() {
        let path = write_temp("hdr.tsv", "sentence1\tsentence2\tlabel\na\tb\t1\n");
        let mut config = toy_config(TaskKind::Classification, LabelRange::BINARY);
        config.has_header = true;
        assert_eq!(load_tsv(&path, &config).unwrap().len(), 1);
    }

    #[test]
    fn rejects_out_of_range_label_with_line_number() {
        let path = write_temp("range.tsv", "a\tb\t2.5\nc\td\t5.5\n");
        let config = toy_config(TaskKind::Regression, LabelRange::new(0.0, 5.0).unwrap());
        let err = load_tsv(&path, &config).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("5.5"), "{err}");
    }

    #[test]
    fn rejects_malformed_row_with_line_number() {
        let path = write_temp("malformed.tsv", "a\tb\t1\nonly two fields\t0\n");
        let config = toy_config(TaskKind::Classification, LabelRange::BINARY);
        let err = load_tsv(&path, &config).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn truncates_to_token_cap() {
        let long: String = (0..100).map(|i| format!("t{i} ")).collect();
        let path = write_temp("cap.tsv", &format!("{long}\tshort one\t1\n"));
        let mut config = toy_config(TaskKind::Classification, LabelRange::BINARY);
        config.token_cap = 30;
        let ds = load_tsv(&path, &config).unwrap();
        assert_eq!(ds.examples[0].tokens_a.len(), 30);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = make_synthetic(TaskKind::Classification, 10, 7).unwrap();
        let (train, dev) = ds.split(0.1, 0).unwrap();
        assert_eq!((train.len(), dev.len()), (9, 1));
        let (train2, dev2) = ds.split(0.1, 0).unwrap();
        assert_eq!(train.examples, train2.examples);
        assert_eq!(dev.examples, dev2.examples);

        // union is the original multiset
        let mut all: Vec<String> = train
            .examples
            .iter()
            .chain(&dev.examples)
            .map(|e| format!("{:?}", e))
            .collect();
        let mut orig: Vec<String> = ds.examples.iter().map(|e| format!("{:?}", e)).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_tiny_and_bad_fractions() {
        let ds = make_synthetic(TaskKind::Classification, 8, 7).unwrap();
        assert!(ds.split(0.0, 0).is_err());
        assert!(ds.split(1.0, 0).is_err());
        let one = SentencePairDataset::new(
            "one",
            TaskKind::Classification,
            LabelRange::BINARY,
            vec![PairExample {
                tokens_a: vec!["a".into()],
                tokens_b: vec!["b".into()],
                label: 0.0,
            }],
        )
        .unwrap();
        assert!(one.split(0.5, 0).is_err());
    }

    #[test]
    fn synthetic_classification_is_balanced_and_reproducible() {
        let ds = make_synthetic(TaskKind::Classification, 1000, 3).unwrap();
        let pos = ds.examples.iter().filter(|e| e.label == 1.0).count();
        assert!((450..=550).contains(&pos), "positives: {pos}");
        let again = make_synthetic(TaskKind::Classification, 1000, 3).unwrap();
        assert_eq!(ds.examples, again.examples);
        assert!(make_synthetic(TaskKind::Classification, 7, 0).is_err());
    }

    #[test]
    fn positive_pairs_are_permutations_negatives_differ_by_one() {
        let ds = make_synthetic(TaskKind::Classification, 200, 11).unwrap();
        for ex in &ds.examples {
            let mut a = ex.tokens_a.clone();
            let mut b = ex.tokens_b.clone();
            a.sort();
            b.sort();
            if ex.label == 1.0 {
                assert_eq!(a, b);
            } else {
                assert_ne!(a, b);
                assert_eq!(a.len(), b.len());
                let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
                // sorted multisets of a one-token substitution differ in a
                // contiguous window, but never everywhere
                assert!(diff >= 1 && diff <= a.len());
            }
        }
    }

    #[test]
    fn regression_labels_hit_the_range_ends() {
        let range = LabelRange::new(0.0, 5.0).unwrap();
        let same: Vec<String> = vec!["a".into(), "b".into(), "a".into()];
        assert_eq!(regression_label(&same, &same, range), 5.0);
        let other: Vec<String> = vec!["x".into(), "y".into()];
        assert_eq!(regression_label(&same, &other, range), 0.0);
    }

    #[test]
    fn synthetic_regression_labels_are_consistent_with_their_sentences() {
        let ds = make_synthetic(TaskKind::Regression, 100, 13).unwrap();
        for ex in &ds.examples {
            let expected = regression_label(&ex.tokens_a, &ex.tokens_b, ds.label_range);
            assert_eq!(ex.label, expected);
        }
    }

    #[test]
    fn oov_lookup_is_zero_vector() {
        let emb = StaticEmbeddings::new(
            3,
            HashMap::from([("known".to_string(), vec![1.0, 2.0, 3.0])]),
        )
        .unwrap();
        assert_eq!(emb.lookup("known"), vec![1.0, 2.0, 3.0]);
        assert_eq!(emb.lookup("unknown"), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn toy_hash_is_stable_and_dimensioned() {
        let a = toy_hash_vector("token", 8);
        let b = toy_hash_vector("token", 8);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert_ne!(a, toy_hash_vector("other", 8));
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn embedding_file_roundtrip_and_validation() {
        let path = write_temp("emb.txt", "hello 0.1 0.2\nworld 0.3 0.4\n");
        let emb = load_embeddings_text(&path).unwrap();
        assert_eq!(emb.lookup("world"), vec![0.3, 0.4]);
        let bad = write_temp("emb_bad.txt", "hello 0.1 0.2\nworld 0.3\n");
        assert!(load_embeddings_text(&bad).is_err());
    }

    fn two_layer_fixture() -> MultiLayerEmbeddings {
        let l0 = HashMap::from([
            ("a".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![0.0, 1.0]),
        ]);
        let l1 = HashMap::from([
            ("a".to_string(), vec![10.0, 0.0]),
            ("b".to_string(), vec![0.0, 10.0]),
        ]);
        MultiLayerEmbeddings::new(2, vec![l0, l1], LayerKeying::Token).unwrap()
    }

    #[test]
    fn one_hot_fixed_mix_equals_that_layer() {
        let emb = two_layer_fixture();
        let s: Vec<String> = vec!["a".into(), "b".into()];
        let sents: Vec<&[String]> = vec![&s];
        let only_l1 = embed_multilayer_fixed(&emb, &[0.0, 1.0], &sents, None).unwrap();
        assert_eq!(only_l1.data(), &[10.0, 0.0, 0.0, 10.0]);
        let only_l0 = embed_multilayer_fixed(&emb, &[1.0, 0.0], &sents, None).unwrap();
        assert_eq!(only_l0.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn graph_mix_matches_fixed_mix_through_softmax() {
        let emb = two_layer_fixture();
        let s1: Vec<String> = vec!["a".into(), "b".into(), "a".into()];
        let s2: Vec<String> = vec!["b".into()];
        let sents: Vec<&[String]> = vec![&s1, &s2];
        let mut store = ParamStore::new();
        let logits = emb.register_mix_logits(&mut store, "mix").unwrap();
        store.value_mut(logits).data_mut().copy_from_slice(&[0.3, -0.7]);
        let w = {
            let (a, b) = (0.3f64.exp(), (-0.7f64).exp());
            [a / (a + b), b / (a + b)]
        };
        let provider = EmbeddingProvider::MultiLayer(emb.clone());
        let mut g = Graph::new();
        let batch = embed_batch(&mut g, &store, &provider, Some(logits), &sents, None).unwrap();
        let expected = embed_multilayer_fixed(&emb, &w, &sents, None).unwrap();
        for (a, b) in g.value(batch.inputs).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!((batch.batch, batch.time), (2, 3));
    }

    #[test]
    fn mix_logits_receive_gradients() {
        let emb = two_layer_fixture();
        let s: Vec<String> = vec!["a".into()];
        let sents: Vec<&[String]> = vec![&s];
        let mut store = ParamStore::new();
        let logits = emb.register_mix_logits(&mut store, "mix").unwrap();
        let provider = EmbeddingProvider::MultiLayer(emb);
        let mut g = Graph::new();
        let batch = embed_batch(&mut g, &store, &provider, Some(logits), &sents, None).unwrap();
        let loss = g.mean_all(batch.inputs).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert!(grads[0].1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pair_position_keying_looks_up_by_position() {
        let l0 = HashMap::from([
            ("p0:a#0".to_string(), vec![1.0]),
            ("p0:a#1".to_string(), vec![2.0]),
        ]);
        let emb = MultiLayerEmbeddings::new(1, vec![l0], LayerKeying::PairPosition).unwrap();
        let s: Vec<String> = vec!["x".into(), "y".into()];
        let sents: Vec<&[String]> = vec![&s];
        let keys = vec!["p0:a".to_string()];
        let out = embed_multilayer_fixed(&emb, &[1.0], &sents, Some(&keys)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn batch_mask_marks_padding() {
        let s1: Vec<String> = vec!["a".into(), "b".into()];
        let s2: Vec<String> = vec!["c".into()];
        let mask = batch_mask(&[&s1, &s2]).unwrap();
        assert_eq!(mask.shape(), &[2, 2]);
        assert_eq!(mask.data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn pearson_known_values() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().value, 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().value, -1.0);
        let r = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_matches_double_loop_covariance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let x: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..100).map(|_| rng.gen_range(-5.0..5.0)).collect();
        // covariance via all-pairs differences: cov = sum_ij (xi-xj)(yi-yj) / (2 n^2)
        let n = x.len() as f64;
        let pairwise = |u: &[f64], v: &[f64]| {
            let mut s = 0.0;
            for i in 0..u.len() {
                for j in 0..u.len() {
                    s += (u[i] - u[j]) * (v[i] - v[j]);
                }
            }
            s / (2.0 * n * n)
        };
        let expected = pairwise(&x, &y) / (pairwise(&x, &x) * pairwise(&y, &y)).sqrt();
        let got = pearson(&x, &y).unwrap().value;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..20 {
            let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = rng.gen_range(0.1..4.0);
            let b = rng.gen_range(-2.0..2.0);
            let y: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
            assert!((pearson(&x, &y).unwrap().value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_and_f1_hand_cases() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap(), 0.75);
        // tp=2, fp=1, fn=0 -> precision 2/3, recall 1 -> f1 = 0.8
        assert!((f1_binary(&[1, 1, 1, 0], &[1, 1, 0, 0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(f1_binary(&[0, 0], &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn metric_report_routes_by_task() {
        let c = compute_metrics(TaskKind::Classification, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(c.primary, 0.5);
        assert!(c.pearson.is_none());
        let r = compute_metrics(TaskKind::Regression, &[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(r.primary, 1.0);
        assert!(r.accuracy.is_none());
    }
}
