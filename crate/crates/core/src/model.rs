//! Small frozen base networks that adapters attach to.
//!
//! Two architectures are provided: a dense projection (optionally followed
//! by a ReLU and a softmax classifier, otherwise trained as a regression)
//! and a stack of single-head attention blocks over token sequences whose
//! query and value projections accept adapters.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig, Scheme};
use crate::autodiff::{LeafKind, SlotId, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

pub const EMBEDDING: &str = "embed";
pub const HEAD: &str = "head";
/// Additive attention mask between tokens of different samples.
const MASKED: f64 = -1e300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `x (k) -> layer0.fc (d x k) [-> relu] [-> head (classes x d)]`.
    Dense {
        input_dim: usize,
        hidden_dim: usize,
        classes: Option<usize>,
        relu: bool,
    },
    /// Token embedding followed by `layers` residual attention blocks,
    /// mean pooling and a classifier head.
    Attention {
        vocab: usize,
        d_model: usize,
        classes: usize,
        layers: usize,
    },
}

impl ModelSpec {
    fn validate(&self) -> Result<()> {
        let dims: Vec<(&str, usize)> = match *self {
            ModelSpec::Dense {
                input_dim,
                hidden_dim,
                classes,
                ..
            } => {
                vec![
                    ("input_dim", input_dim),
                    ("hidden_dim", hidden_dim),
                    ("classes", classes.unwrap_or(1)),
                ]
            }
            ModelSpec::Attention {
                vocab,
                d_model,
                classes,
                layers,
            } => {
                vec![
                    ("vocab", vocab),
                    ("d_model", d_model),
                    ("classes", classes),
                    ("layers", layers),
                ]
            }
        };
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Option<usize> {
        match *self {
            ModelSpec::Dense { classes, .. } => classes,
            ModelSpec::Attention { classes, .. } => Some(classes),
        }
    }

    /// Every projection, adaptable or not, with its `(out, in)` shape.
    pub fn projections(&self) -> Vec<(String, (usize, usize))> {
        match *self {
            ModelSpec::Dense {
                input_dim,
                hidden_dim,
                ..
            } => vec![("layer0.fc".into(), (hidden_dim, input_dim))],
            ModelSpec::Attention {
                d_model, layers, ..
            } => (0..layers)
                .flat_map(|l| {
                    ["q_proj", "k_proj", "v_proj"]
                        .map(|p| (format!("layer{l}.{p}"), (d_model, d_model)))
                })
                .collect(),
        }
    }

    pub fn is_adaptable(&self, point: &str) -> bool {
        match self {
            ModelSpec::Dense { .. } => point == "layer0.fc",
            ModelSpec::Attention { .. } => {
                (point.ends_with(".q_proj") || point.ends_with(".v_proj"))
                    && self.projections().iter().any(|(p, _)| p == point)
            }
        }
    }

    /// Points adapters may attach to, in layer order.
    pub fn adaptable_points(&self) -> Vec<String> {
        self.projections()
            .into_iter()
            .map(|(p, _)| p)
            .filter(|p| self.is_adaptable(p))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// One row per sample.
    Dense(Matrix),
    /// Equal-length token id sequences, one per sample.
    Tokens(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Regression targets, one row per sample.
    Values(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
    /// Task index per sample, used to route task-dedicated Split heads.
    pub tasks: Option<Vec<usize>>,
}

impl Batch {
    pub fn dense(x: Matrix, labels: Vec<usize>) -> Result<Batch> {
        Batch::checked(Inputs::Dense(x), Targets::Classes(labels))
    }

    pub fn regression(x: Matrix, y: Matrix) -> Result<Batch> {
        Batch::checked(Inputs::Dense(x), Targets::Values(y))
    }

    pub fn tokens(seqs: Vec<Vec<usize>>, labels: Vec<usize>) -> Result<Batch> {
        Batch::checked(Inputs::Tokens(seqs), Targets::Classes(labels))
    }

    pub fn with_tasks(mut self, tasks: Vec<usize>) -> Result<Batch> {
        if tasks.len() != self.len() {
            return Err(Error::shape(format!(
                "{} task tags for {} samples",
                tasks.len(),
                self.len()
            )));
        }
        self.tasks = Some(tasks);
        Ok(self)
    }

    fn checked(inputs: Inputs, targets: Targets) -> Result<Batch> {
        let n = match &inputs {
            Inputs::Dense(m) => m.rows(),
            Inputs::Tokens(seqs) => {
                let t = seqs.first().map(Vec::len).unwrap_or(0);
                if t == 0 || seqs.iter().any(|s| s.len() != t) {
                    return Err(Error::shape(
                        "token sequences must be non-empty and of equal length",
                    ));
                }
                seqs.len()
            }
        };
        let m = match &targets {
            Targets::Classes(l) => l.len(),
            Targets::Values(y) => y.rows(),
        };
        if n == 0 || n != m {
            return Err(Error::shape(format!("{n} samples with {m} targets")));
        }
        Ok(Batch {
            inputs,
            targets,
            tasks: None,
        })
    }

    pub fn len(&self) -> usize {
        match &self.targets {
            Targets::Classes(l) => l.len(),
            Targets::Values(y) => y.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let rows = |m: &Matrix| {
            Matrix::from_rows(
                &indices
                    .iter()
                    .map(|&i| m.row(i).to_vec())
                    .collect::<Vec<_>>(),
            )
        };
        let inputs = match &self.inputs {
            Inputs::Dense(m) => Inputs::Dense(rows(m)?),
            Inputs::Tokens(s) => Inputs::Tokens(indices.iter().map(|&i| s[i].clone()).collect()),
        };
        let targets = match &self.targets {
            Targets::Classes(l) => Targets::Classes(indices.iter().map(|&i| l[i]).collect()),
            Targets::Values(y) => Targets::Values(rows(y)?),
        };
        let tasks = self
            .tasks
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        Ok(Batch {
            inputs,
            targets,
            tasks,
        })
    }
}

/// Which parameters a recorded graph treats as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainMask {
    pub adapters: bool,
    pub head: bool,
    pub base: bool,
}

impl TrainMask {
    pub const NONE: TrainMask = TrainMask {
        adapters: false,
        head: false,
        base: false,
    };

    pub fn adapters(head: bool) -> Self {
        TrainMask {
            adapters: true,
            head,
            base: false,
        }
    }

    pub fn full() -> Self {
        TrainMask {
            adapters: true,
            head: true,
            base: true,
        }
    }
}

/// A recorded forward pass.
pub struct Graph {
    pub tape: Tape,
    pub loss: SlotId,
    /// Logits for classification, predictions for regression.
    pub output: SlotId,
    /// Gate matrix of every Hydra attachment.
    pub gates: BTreeMap<String, SlotId>,
    /// Attention probabilities per layer.
    pub attention: Vec<SlotId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub output: Matrix,
    pub loss: f64,
    /// Mean gate weight per expert for every Hydra attachment.
    pub gate_usage: BTreeMap<String, Vec<f64>>,
}

impl ForwardOutput {
    /// Fraction of rows whose argmax matches the label.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                let row = self.output.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == l
            })
            .count();
        hits as f64 / labels.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    spec: ModelSpec,
    base: BTreeMap<String, Matrix>,
    head: Option<Matrix>,
    adapters: BTreeMap<String, Adapter>,
    task_dedicated_heads: bool,
}

impl ToyModel {
    /// Random base weights with `N(0, 1/fan_in)` entries.
    pub fn new(spec: ModelSpec, rng: &mut SeededRng) -> Result<ToyModel> {
        spec.validate()?;
        let mut base = BTreeMap::new();
        if let ModelSpec::Attention { vocab, d_model, .. } = spec {
            base.insert(
                EMBEDDING.to_string(),
                rng.normal_matrix(vocab, d_model, 1.0),
            );
        }
        for (name, (rows, cols)) in spec.projections() {
            let m = rng.normal_matrix(rows, cols, 1.0 / (cols as f64).sqrt());
            base.insert(name, m);
        }
        let head = match (spec, spec.classes()) {
            (ModelSpec::Dense { hidden_dim, .. }, Some(c)) => {
                Some(rng.normal_matrix(c, hidden_dim, 1.0 / (hidden_dim as f64).sqrt()))
            }
            (ModelSpec::Attention { d_model, .. }, Some(c)) => {
                Some(rng.normal_matrix(c, d_model, 1.0 / (d_model as f64).sqrt()))
            }
            _ => None,
        };
        Ok(ToyModel {
            spec,
            base,
            head,
            adapters: BTreeMap::new(),
            task_dedicated_heads: false,
        })
    }

    /// Replace a base weight or the head (named [`HEAD`]).
    pub fn with_weight(mut self, name: &str, value: Matrix) -> Result<ToyModel> {
        let slot = if name == HEAD {
            self.head.as_mut()
        } else {
            self.base.get_mut(name)
        };
        let slot = slot.ok_or_else(|| Error::usage(format!("model has no weight {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{name} is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(self)
    }

    /// Route each sample's Split adapter through the head matching its task tag.
    pub fn with_task_dedicated_heads(mut self, on: bool) -> ToyModel {
        self.task_dedicated_heads = on;
        self
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn base(&self) -> &BTreeMap<String, Matrix> {
        &self.base
    }

    pub fn head(&self) -> Option<&Matrix> {
        self.head.as_ref()
    }

    pub fn adapters(&self) -> &BTreeMap<String, Adapter> {
        &self.adapters
    }

    pub fn adapter(&self, point: &str) -> Option<&Adapter> {
        self.adapters.get(point)
    }

    pub fn base_param_count(&self) -> usize {
        self.base.values().map(Matrix::len).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.as_ref().map_or(0, Matrix::len)
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(Adapter::trainable_params).sum()
    }

    /// Order-sensitive hash of the bit patterns of every base weight.
    pub fn base_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, m) in &self.base {
            name.hash(&mut h);
            m.shape().hash(&mut h);
            for v in m.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Build an adapter for `point` and install it, replacing any existing one.
    pub fn attach(
        &mut self,
        point: &str,
        config: &AdapterConfig,
        rng: &mut SeededRng,
    ) -> Result<()> {
        let (d, k) = self.check_point(point)?;
        let adapter = config.build(d, k, rng)?;
        self.adapters.insert(point.to_string(), adapter);
        Ok(())
    }

    /// Install a prebuilt adapter whose shape matches the projection.
    pub fn attach_adapter(&mut self, point: &str, adapter: Adapter) -> Result<()> {
        let (d, k) = self.check_point(point)?;
        if (adapter.out_dim(), adapter.in_dim()) != (d, k) {
            return Err(Error::shape(format!(
                "adapter is {}x{}, projection {point} is {d}x{k}",
                adapter.out_dim(),
                adapter.in_dim()
            )));
        }
        self.adapters.insert(point.to_string(), adapter);
        Ok(())
    }

    fn check_point(&self, point: &str) -> Result<(usize, usize)> {
        if !self.spec.is_adaptable(point) {
            let known = self.spec.adaptable_points().join(", ");
            return Err(Error::usage(format!(
                "{point:?} is not an adaptable projection (expected one of: {known})"
            )));
        }
        Ok(self.base[point].shape())
    }

    /// Record the forward pass and loss on a fresh tape.
    pub fn record(&self, batch: &Batch, mask: TrainMask) -> Result<Graph> {
        let mut tape = Tape::new();
        let base_kind = if mask.base {
            LeafKind::Trainable
        } else {
            LeafKind::Frozen
        };
        let adapter_kind = if mask.adapters {
            LeafKind::Trainable
        } else {
            LeafKind::Frozen
        };
        let head_kind = if mask.head {
            LeafKind::Trainable
        } else {
            LeafKind::Frozen
        };
        let mut gates = BTreeMap::new();
        let mut attention = Vec::new();

        let tokens_per_sample = match &batch.inputs {
            Inputs::Dense(_) => 1,
            Inputs::Tokens(s) => s[0].len(),
        };
        let task_rows: Option<Vec<usize>> = batch
            .tasks
            .as_ref()
            .filter(|_| self.task_dedicated_heads)
            .map(|t| {
                t.iter()
                    .flat_map(|&task| std::iter::repeat_n(task, tokens_per_sample))
                    .collect()
            });

        let mut project = |tape: &mut Tape, point: &str, x: SlotId| -> Result<SlotId> {
            let w = tape.leaf(base_kind, point, self.base[point].clone());
            let wt = tape.transpose(w)?;
            let y = tape.matmul(x, wt)?;
            let Some(adapter) = self.adapters.get(point) else {
                return Ok(y);
            };
            let head_mask = match (adapter, &task_rows) {
                (Adapter::Split(_), Some(rows)) => Some(one_hot_rows(rows, adapter.count())),
                _ => None,
            };
            let (delta, g) = adapter.record(tape, x, point, adapter_kind, head_mask.as_ref())?;
            if let Some(g) = g {
                gates.insert(point.to_string(), g);
            }
            tape.add(y, delta)
        };

        let output = match (&self.spec, &batch.inputs) {
            (
                ModelSpec::Dense {
                    input_dim, relu, ..
                },
                Inputs::Dense(x),
            ) => {
                if x.cols() != *input_dim {
                    return Err(Error::shape(format!(
                        "inputs have {} features, model expects {input_dim}",
                        x.cols()
                    )));
                }
                let xs = tape.input(x.clone());
                let h = project(&mut tape, "layer0.fc", xs)?;
                let h = if *relu { tape.relu(h)? } else { h };
                match &self.head {
                    Some(head) => {
                        let hl = tape.leaf(head_kind, HEAD, head.clone());
                        let ht = tape.transpose(hl)?;
                        tape.matmul(h, ht)?
                    }
                    None => h,
                }
            }
            (
                ModelSpec::Attention {
                    vocab,
                    d_model,
                    layers,
                    ..
                },
                Inputs::Tokens(seqs),
            ) => {
                let t = seqs[0].len();
                let rows = seqs.len() * t;
                let mut onehot = Matrix::zeros(rows, *vocab);
                for (i, &tok) in seqs.iter().flatten().enumerate() {
                    if tok >= *vocab {
                        return Err(Error::contract(format!(
                            "token id {tok} outside vocabulary of {vocab}"
                        )));
                    }
                    onehot.set(i, tok, 1.0);
                }
                let oh = tape.input(onehot);
                let emb = tape.leaf(base_kind, EMBEDDING, self.base[EMBEDDING].clone());
                let mut x = tape.matmul(oh, emb)?;
                let block_mask = tape.input(block_diagonal_mask(seqs.len(), t));
                for l in 0..*layers {
                    let q = project(&mut tape, &format!("layer{l}.q_proj"), x)?;
                    let k = project(&mut tape, &format!("layer{l}.k_proj"), x)?;
                    let v = project(&mut tape, &format!("layer{l}.v_proj"), x)?;
                    let kt = tape.transpose(k)?;
                    let scores = tape.matmul(q, kt)?;
                    let scores = tape.scale(scores, 1.0 / (*d_model as f64).sqrt())?;
                    let scores = tape.add(scores, block_mask)?;
                    let probs = tape.softmax_rows(scores)?;
                    attention.push(probs);
                    let h = tape.matmul(probs, v)?;
                    x = tape.add(x, h)?;
                }
                let pool = tape.input(mean_pool(seqs.len(), t));
                let pooled = tape.matmul(pool, x)?;
                let head = self
                    .head
                    .as_ref()
                    .expect("attention models always have a head");
                let hl = tape.leaf(head_kind, HEAD, head.clone());
                let ht = tape.transpose(hl)?;
                tape.matmul(pooled, ht)?
            }
            _ => {
                return Err(Error::usage(
                    "batch inputs do not match the model architecture",
                ))
            }
        };

        let loss = match (&batch.targets, self.spec.classes()) {
            (Targets::Classes(labels), Some(_)) => tape.softmax_cross_entropy(output, labels)?,
            (Targets::Values(y), None) => tape.mean_squared_error(output, y.clone())?,
            _ => {
                return Err(Error::usage(
                    "batch targets do not match the model objective",
                ))
            }
        };
        Ok(Graph {
            tape,
            loss,
            output,
            gates,
            attention,
        })
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        let g = self.record(batch, TrainMask::NONE)?;
        Ok(ForwardOutput {
            output: g.tape.value(g.output).clone(),
            loss: g.tape.scalar(g.loss),
            gate_usage: gate_usage(&g),
        })
    }

    /// Attention probabilities of every layer, `(batch * T) x (batch * T)`.
    pub fn attention_weights(&self, batch: &Batch) -> Result<Vec<Matrix>> {
        let g = self.record(batch, TrainMask::NONE)?;
        Ok(g.attention
            .iter()
            .map(|&s| g.tape.value(s).clone())
            .collect())
    }

    /// Mutable access to a parameter by its tape leaf name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if name == HEAD {
            return self.head.as_mut();
        }
        if self.base.contains_key(name) {
            return self.base.get_mut(name);
        }
        let (point, adapter) = self.adapters.iter_mut().find(|(p, _)| {
            name.len() > p.len() + 1
                && name.starts_with(p.as_str())
                && name.as_bytes()[p.len()] == b'.'
        })?;
        let local = &name[point.len() + 1..];
        adapter
            .tensors_mut()
            .into_iter()
            .find(|(n, _)| n == local)
            .map(|(_, m)| m)
    }

    /// Adapters, head and (when `include_base`) base weights as a checkpoint.
    pub fn to_checkpoint(&self, include_base: bool) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (point, adapter) in &self.adapters {
            ck.insert_adapter(point, adapter);
        }
        if let Some(h) = &self.head {
            ck.tensors.insert(HEAD.to_string(), h.clone());
        }
        if include_base {
            for (name, m) in &self.base {
                ck.tensors.insert(format!("base.{name}"), m.clone());
            }
        }
        ck
    }

    /// Load adapters, head and any base weights saved by [`ToyModel::to_checkpoint`].
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (point, adapter) in ck.adapters()? {
            self.attach_adapter(&point, adapter)?;
        }
        for (name, m) in &ck.tensors {
            if name == HEAD {
                let head = self
                    .head
                    .as_mut()
                    .ok_or_else(|| Error::usage("checkpoint has a head, model has none"))?;
                if head.shape() != m.shape() {
                    return Err(Error::shape("checkpoint head shape differs from model"));
                }
                *head = m.clone();
            } else if let Some(base) = name.strip_prefix("base.") {
                let w = self
                    .base
                    .get_mut(base)
                    .ok_or_else(|| Error::usage(format!("model has no weight {base:?}")))?;
                if w.shape() != m.shape() {
                    return Err(Error::shape(format!(
                        "checkpoint {base} shape differs from model"
                    )));
                }
                *w = m.clone();
            }
        }
        Ok(())
    }

    /// Scheme of the attached adapters, if all share one.
    pub fn scheme(&self) -> Option<Scheme> {
        let mut schemes = self.adapters.values().map(Adapter::scheme);
        let first = schemes.next()?;
        schemes.all(|s| s == first).then_some(first)
    }
}

/// Mean gate weight per expert for every Hydra attachment of a graph.
pub fn gate_usage(g: &Graph) -> BTreeMap<String, Vec<f64>> {
    g.gates
        .iter()
        .map(|(p, &s)| {
            let m = g.tape.value(s);
            let t = m.transpose();
            (
                p.clone(),
                (0..m.cols())
                    .map(|j| {
                        crate::linalg::compensated_sum(t.row(j).iter().copied()) / m.rows() as f64
                    })
                    .collect(),
            )
        })
        .collect()
}

fn one_hot_rows(tasks: &[usize], n: usize) -> Matrix {
    let mut m = Matrix::zeros(tasks.len(), n);
    for (i, &t) in tasks.iter().enumerate() {
        m.set(i, t % n, 1.0);
    }
    m
}

fn block_diagonal_mask(samples: usize, t: usize) -> Matrix {
    let n = samples * t;
    let mut m = Matrix::filled(n, n, MASKED);
    for s in 0..samples {
        for i in s * t..(s + 1) * t {
            for j in s * t..(s + 1) * t {
                m.set(i, j, 0.0);
            }
        }
    }
    m
}

fn mean_pool(samples: usize, t: usize) -> Matrix {
    let mut m = Matrix::zeros(samples, samples * t);
    for s in 0..samples {
        for j in s * t..(s + 1) * t {
            m.set(s, j, 1.0 / t as f64);
        }
    }
    m
}

/// A pretrained attention base: random weights followed by `steps` of
/// full-parameter SGD on a seeded token classification mixture.
pub fn pretrained_attention(
    spec: ModelSpec,
    seq_len: usize,
    steps: usize,
    seed: u64,
) -> Result<ToyModel> {
    let mut rng = SeededRng::new(seed);
    let mut model = ToyModel::new(spec, &mut rng)?;
    let ModelSpec::Attention { vocab, classes, .. } = spec else {
        return Err(Error::usage("pretrained_attention needs an attention spec"));
    };
    let batch = token_mixture(vocab, classes, seq_len, 16, &mut rng.derive(1))?;
    for _ in 0..steps {
        let g = model.record(&batch, TrainMask::full())?;
        let grads = g.tape.backward(g.loss)?;
        for (name, grad) in grads.named() {
            if let Some(p) = model.param_mut(name) {
                p.axpy(-0.1, grad)?;
            }
        }
    }
    Ok(model)
}

/// Token sequences whose label is decided by which class-specific token
/// band dominates the sequence.
pub fn token_mixture(
    vocab: usize,
    classes: usize,
    seq_len: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<Batch> {
    if vocab < classes {
        return Err(Error::usage(
            "vocabulary must be at least as large as the class count",
        ));
    }
    let band = vocab / classes;
    let mut seqs = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let label = rng.below(classes);
        let seq = (0..seq_len)
            .map(|_| {
                if rng.uniform() < 0.7 {
                    label * band + rng.below(band)
                } else {
                    rng.below(vocab)
                }
            })
            .collect();
        seqs.push(seq);
        labels.push(label);
    }
    Batch::tokens(seqs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn attention_spec() -> ModelSpec {
        ModelSpec::Attention {
            vocab: 20,
            d_model: 16,
            classes: 3,
            layers: 2,
        }
    }

    fn token_batch(seed: u64) -> Batch {
        token_mixture(20, 3, 5, 6, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn zero_init_adapters_leave_loss_unchanged() {
        let mut rng = SeededRng::new(1);
        let base = ToyModel::new(attention_spec(), &mut rng).unwrap();
        let batch = token_batch(2);
        let before = base.forward(&batch).unwrap();
        for cfg in [
            AdapterConfig::lora(4),
            AdapterConfig::split(2, 2),
            AdapterConfig::hydra(4, 3),
        ] {
            let mut m = base.clone();
            for p in m.spec().adaptable_points() {
                m.attach(&p, &cfg, &mut rng).unwrap();
            }
            let after = m.forward(&batch).unwrap();
            assert_eq!(after.loss, before.loss);
            assert_eq!(after.output, before.output);
        }
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let spec = ModelSpec::Dense {
            input_dim: 3,
            hidden_dim: 4,
            classes: Some(5),
            relu: false,
        };
        let m = ToyModel::new(spec, &mut SeededRng::new(0))
            .unwrap()
            .with_weight(HEAD, Matrix::zeros(5, 4))
            .unwrap();
        let batch = Batch::dense(Matrix::filled(2, 3, 0.3), vec![0, 4]).unwrap();
        assert!((m.forward(&batch).unwrap().loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn attach_rules() {
        let mut m = ToyModel::new(attention_spec(), &mut SeededRng::new(0)).unwrap();
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            m.attach("nonexistent", &AdapterConfig::lora(2), &mut rng),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            m.attach("layer0.k_proj", &AdapterConfig::lora(2), &mut rng),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            m.attach("layer0.q_proj", &AdapterConfig::lora(17), &mut rng),
            Err(Error::Invariant(_))
        ));
        m.attach("layer1.v_proj", &AdapterConfig::hydra(4, 2), &mut rng)
            .unwrap();
        let out = m.forward(&token_batch(3)).unwrap();
        let usage = &out.gate_usage["layer1.v_proj"];
        assert!((usage.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_within_each_sample() {
        let m = ToyModel::new(attention_spec(), &mut SeededRng::new(4)).unwrap();
        for probs in m.attention_weights(&token_batch(5)).unwrap() {
            for i in 0..probs.rows() {
                let row = probs.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let sample = i / 5;
                for (j, &p) in row.iter().enumerate() {
                    if j / 5 != sample {
                        assert_eq!(p, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_range_label_is_contract_error() {
        let m = ToyModel::new(attention_spec(), &mut SeededRng::new(0)).unwrap();
        let batch = Batch::tokens(vec![vec![1, 2]], vec![3]).unwrap();
        assert!(matches!(m.forward(&batch), Err(Error::Contract(_))));
    }

    #[test]
    fn full_path_gradients() {
        let mut rng = SeededRng::new(11);
        let mut m = ToyModel::new(attention_spec(), &mut rng).unwrap();
        m.attach("layer0.q_proj", &AdapterConfig::hydra(4, 3), &mut rng)
            .unwrap();
        m.attach("layer1.v_proj", &AdapterConfig::hydra(3, 2), &mut rng)
            .unwrap();
        for ad in m.adapters.values_mut() {
            for (_, t) in ad.tensors_mut() {
                let noise = rng.normal_matrix(t.rows(), t.cols(), 0.3);
                *t = noise;
            }
        }
        let mut g = m
            .record(&token_batch(12), TrainMask::adapters(true))
            .unwrap();
        let report = grad_check(&mut g.tape, g.loss, &mut rng, 1e-6).unwrap();
        assert!(report.max_relative_error() <= 1e-6, "{report:?}");
    }

    #[test]
    fn separable_dense_task_trains_below_tenth() {
        let spec = ModelSpec::Dense {
            input_dim: 2,
            hidden_dim: 4,
            classes: Some(2),
            relu: false,
        };
        let mut rng = SeededRng::new(3);
        let mut m = ToyModel::new(spec, &mut rng).unwrap();
        m.attach("layer0.fc", &AdapterConfig::lora(2), &mut rng)
            .unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            rows.push(vec![
                sign * rng.uniform_in(1.0, 2.0),
                rng.uniform_in(-1.0, 1.0),
            ]);
            labels.push(label);
        }
        let batch = Batch::dense(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let frozen = m.base_hash();
        for _ in 0..300 {
            let g = m.record(&batch, TrainMask::adapters(true)).unwrap();
            let grads = g.tape.backward(g.loss).unwrap();
            for (name, grad) in grads.named() {
                m.param_mut(name).unwrap().axpy(-0.5, grad).unwrap();
            }
        }
        assert!(m.forward(&batch).unwrap().loss < 0.1);
        assert_eq!(m.base_hash(), frozen);
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let mut rng = SeededRng::new(8);
        let mut m = ToyModel::new(attention_spec(), &mut rng).unwrap();
        m.attach("layer0.v_proj", &AdapterConfig::split(2, 2), &mut rng)
            .unwrap();
        *m.param_mut("layer0.v_proj.head1.B").unwrap() = rng.normal_matrix(16, 2, 1.0);
        let text = m.to_checkpoint(false).to_text();
        let mut fresh = ToyModel::new(attention_spec(), &mut SeededRng::new(8)).unwrap();
        fresh
            .load_checkpoint(&Checkpoint::parse(&text).unwrap())
            .unwrap();
        let b = token_batch(9);
        assert_eq!(fresh.forward(&b).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn pretraining_lowers_loss_and_is_deterministic() {
        let spec = ModelSpec::Attention {
            vocab: 24,
            d_model: 16,
            classes: 3,
            layers: 1,
        };
        let raw = ToyModel::new(spec, &mut SeededRng::new(5)).unwrap();
        let a = pretrained_attention(spec, 6, 20, 5).unwrap();
        let b = pretrained_attention(spec, 6, 20, 5).unwrap();
        assert_eq!(a.base_hash(), b.base_hash());
        let batch = token_mixture(24, 3, 6, 32, &mut SeededRng::new(5).derive(1)).unwrap();
        assert!(a.forward(&batch).unwrap().loss < raw.forward(&batch).unwrap().loss);
    }
}
