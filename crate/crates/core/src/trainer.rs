//! Fine-tuning loop, run configuration and the experiment harnesses.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig, Scheme};
use crate::analysis::{separation, Separation};
use crate::autodiff::Gradients;
use crate::checkpoint::Checkpoint;
use crate::clustering::ClusterReport;
use crate::corpus::{synth_corpus, tokenize, Corpus, SynthSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, SeededRng};
use crate::model::{pretrained_attention, Batch, ModelSpec, Targets, ToyModel, TrainMask};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// What a run trains: adapters of one scheme, or every base weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainScheme {
    Lora,
    Split,
    Hydra,
    Full,
}

impl TrainScheme {
    pub fn adapter_scheme(self) -> Option<Scheme> {
        match self {
            TrainScheme::Lora => Some(Scheme::Lora),
            TrainScheme::Split => Some(Scheme::Split),
            TrainScheme::Hydra => Some(Scheme::Hydra),
            TrainScheme::Full => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainScheme::Full => "full",
            s => s.adapter_scheme().expect("adapter scheme").as_str(),
        }
    }
}

impl From<Scheme> for TrainScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Lora => TrainScheme::Lora,
            Scheme::Split => TrainScheme::Split,
            Scheme::Hydra => TrainScheme::Hydra,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// SGD, or Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Optimizer {
        Optimizer {
            kind,
            lr,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update to every parameter named in `grads`.
    pub fn step(&mut self, model: &mut ToyModel, grads: &Gradients) -> Result<()> {
        self.t += 1;
        if self.lr == 0.0 {
            return Ok(());
        }
        for (name, g) in grads.named() {
            let param = model.param_mut(name).ok_or_else(|| {
                Error::invariant(format!("gradient for unknown parameter {name:?}"))
            })?;
            match self.kind {
                OptimizerKind::Sgd => param.axpy(-self.lr, g)?,
                OptimizerKind::Adam => {
                    let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                        (
                            Matrix::zeros(g.rows(), g.cols()),
                            Matrix::zeros(g.rows(), g.cols()),
                        )
                    });
                    let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                    for (((p, gi), mi), vi) in param
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub train: Batch,
    pub eval: Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub scheme: TrainScheme,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub train_head: bool,
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(
        scheme: TrainScheme,
        learning_rate: f64,
        steps: usize,
        batch_size: usize,
        seed: u64,
    ) -> TrainOptions {
        TrainOptions {
            scheme,
            optimizer: OptimizerKind::Sgd,
            learning_rate,
            steps,
            batch_size,
            eval_interval: steps.max(1),
            train_head: true,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::usage("steps must be at least 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::usage(
                "learning_rate must be a finite non-negative number",
            ));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::usage(
                "batch_size and eval_interval must be at least 1",
            ));
        }
        Ok(())
    }

    fn mask(&self) -> TrainMask {
        match self.scheme {
            TrainScheme::Full => TrainMask::full(),
            _ => TrainMask::adapters(self.train_head),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Classification accuracy; absent for regression.
    pub acc: Option<f64>,
    /// Mean gate weight per expert, averaged over Hydra attachments.
    pub gates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub scheme: TrainScheme,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub adapter_params: usize,
    pub head_params: usize,
    pub base_params: usize,
    /// Parameters the optimizer updated.
    pub trainable_params: usize,
    pub gate_usage: Vec<f64>,
    /// Multiply-accumulates of every training forward pass.
    pub forward_macs: u64,
    pub base_hash_before: String,
    pub base_hash_after: String,
    pub curve: Vec<CurvePoint>,
}

impl TrainReport {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let gates = self.curve.first().map_or(1, |p| p.gates.len());
        let mut header = vec!["step".to_string(), "loss".into(), "acc".into()];
        header.extend((0..gates).map(|i| format!("gate_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for p in &self.curve {
            let mut row = vec![
                p.step.to_string(),
                p.loss.to_string(),
                p.acc.map(|a| a.to_string()).unwrap_or_default(),
            ];
            row.extend(p.gates.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn averaged_gates(usage: &BTreeMap<String, Vec<f64>>) -> Vec<f64> {
    let Some(n) = usage.values().map(Vec::len).max() else {
        return vec![1.0];
    };
    let rows: Vec<&Vec<f64>> = usage.values().filter(|v| v.len() == n).collect();
    (0..n)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn evaluate(model: &ToyModel, eval: &Batch, step: usize) -> Result<CurvePoint> {
    let out = model.forward(eval)?;
    let acc = match &eval.targets {
        Targets::Classes(labels) => Some(out.accuracy(labels)),
        Targets::Values(_) => None,
    };
    Ok(CurvePoint {
        step,
        loss: out.loss,
        acc,
        gates: averaged_gates(&out.gate_usage),
    })
}

/// Fine-tune `model` in place. Base weights are only updated for
/// [`TrainScheme::Full`]; minibatches cycle through seeded permutations
/// of the training set.
pub fn train(model: &mut ToyModel, data: &TrainData, opts: &TrainOptions) -> Result<TrainReport> {
    opts.validate()?;
    if let Some(s) = opts.scheme.adapter_scheme() {
        if model.scheme() != Some(s) {
            return Err(Error::usage(format!(
                "model adapters do not match scheme {}",
                s.as_str()
            )));
        }
    }
    let mask = opts.mask();
    let hash_before = model.base_hash();
    let mut optimizer = Optimizer::new(opts.optimizer, opts.learning_rate);
    let mut rng = SeededRng::new(opts.seed).derive(0x0b47c4);
    let n = data.train.len();
    let full_batch = opts.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut curve = vec![evaluate(model, &data.eval, 0)?];
    let mut macs = 0;
    for step in 1..=opts.steps {
        let minibatch;
        let batch = if full_batch {
            &data.train
        } else {
            let mut idx = Vec::with_capacity(opts.batch_size);
            while idx.len() < opts.batch_size {
                if cursor == n {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            minibatch = data.train.select(&idx)?;
            &minibatch
        };
        let g = model.record(batch, mask)?;
        macs += g.tape.macs();
        let loss = g.tape.scalar(g.loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "training loss is {loss} (learning rate {})",
                    opts.learning_rate
                ),
            });
        }
        let grads = g.tape.backward(g.loss)?;
        optimizer.step(model, &grads)?;
        if step % opts.eval_interval == 0 || step == opts.steps {
            let point = evaluate(model, &data.eval, step)?;
            if !point.loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("evaluation loss is {}", point.loss),
                });
            }
            curve.push(point);
        }
    }

    let hash_after = model.base_hash();
    if opts.scheme != TrainScheme::Full && hash_after != hash_before {
        return Err(Error::invariant(
            "frozen base weights changed during adapter training",
        ));
    }
    let last = curve.last().expect("curve has the initial point").clone();
    let head_params = model.head_param_count();
    let trainable_params = match opts.scheme {
        TrainScheme::Full => model.base_param_count() + head_params + model.adapter_param_count(),
        _ => model.adapter_param_count() + if opts.train_head { head_params } else { 0 },
    };
    Ok(TrainReport {
        seed: opts.seed,
        scheme: opts.scheme,
        steps: opts.steps,
        initial_loss: curve[0].loss,
        final_loss: last.loss,
        final_accuracy: last.acc,
        adapter_params: model.adapter_param_count(),
        head_params,
        base_params: model.base_param_count(),
        trainable_params,
        gate_usage: last.gates,
        forward_macs: macs,
        base_hash_before: format!("{hash_before:016x}"),
        base_hash_after: format!("{hash_after:016x}"),
        curve,
    })
}

// ---------------------------------------------------------------------------
// Configuration files

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub pretrain_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 16,
            layers: 1,
            seq_len: 16,
            pretrain_steps: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub clusters: usize,
    pub docs_per_cluster: usize,
    pub disjointness: f64,
    pub seed: u64,
}

fn default_batch_size() -> usize {
    16
}
fn default_eval_interval() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_eval_fraction() -> f64 {
    0.2
}

/// A training run read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: TrainScheme,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default, alias = "heads")]
    pub experts: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// JSONL corpus whose `task` tags are the class labels.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    /// Clustering output whose `k_selected` sets the expert count.
    #[serde(default)]
    pub experts_from: Option<PathBuf>,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_true")]
    pub train_head: bool,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub model: ModelSection,
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text)
            .map_err(|e| Error::usage(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let path = path.as_ref();
        let mut cfg = TrainConfig::parse(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.experts_from]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: &str| Err(Error::usage(m.to_string()));
        if self.steps == 0 {
            return usage("steps must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return usage("learning_rate must be a finite non-negative number");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return usage("batch_size and eval_interval must be at least 1");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return usage("eval_fraction must lie strictly between 0 and 1");
        }
        let m = &self.model;
        if m.d_model == 0 || m.layers == 0 || m.seq_len == 0 {
            return usage("model dimensions must be at least 1");
        }
        match (self.dataset.is_some(), self.synthetic.is_some()) {
            (true, true) => return usage("give either dataset or [synthetic], not both"),
            (false, false) => return usage("a dataset path or a [synthetic] section is required"),
            _ => {}
        }
        if let Some(alpha) = self.alpha {
            if !alpha.is_finite() || alpha <= 0.0 {
                return usage("alpha must be positive");
            }
        }
        match self.scheme {
            TrainScheme::Full => {}
            s => {
                let Some(rank) = self.rank else {
                    return usage("rank is required for adapter schemes");
                };
                if rank == 0 || rank > m.d_model {
                    return Err(Error::usage(format!(
                        "rank {rank} must lie in 1..={} for d_model {}",
                        m.d_model, m.d_model
                    )));
                }
                if s != TrainScheme::Lora {
                    if self.experts == Some(0) {
                        return usage("experts must be at least 1");
                    }
                    if self.experts.is_none()
                        && (s == TrainScheme::Split || self.experts_from.is_none())
                    {
                        return usage("experts (or heads) is required for split and hydra unless experts_from is given");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            scheme: self.scheme,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            eval_interval: self.eval_interval,
            train_head: self.train_head,
            seed: self.seed,
        }
    }

    /// Expert or head count after resolving `experts_from`.
    pub fn resolved_experts(&self) -> Result<usize> {
        if let Some(n) = self.experts {
            return Ok(n);
        }
        match &self.experts_from {
            Some(path) => {
                let report: ClusterReport = serde_json::from_str(&std::fs::read_to_string(path)?)
                    .map_err(|e| Error::Line {
                    line: e.line(),
                    message: e.to_string(),
                })?;
                if report.k_selected == 0 {
                    return Err(Error::usage("clustering output selects zero experts"));
                }
                Ok(report.k_selected)
            }
            None => Ok(1),
        }
    }

    pub fn corpus(&self) -> Result<Corpus> {
        match (&self.dataset, &self.synthetic) {
            (Some(path), _) => Corpus::load(path),
            (None, Some(s)) => {
                let mut spec =
                    SynthSpec::new(s.clusters, s.docs_per_cluster, s.disjointness, s.seed);
                spec.tag_tasks = true;
                Ok(synth_corpus(&spec)?.corpus)
            }
            (None, None) => Err(Error::usage("no dataset configured")),
        }
    }
}

/// Documents as equal-length token id sequences labeled by task tag.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedCorpus {
    /// Token to id; id 0 is padding.
    pub vocab: BTreeMap<String, usize>,
    pub tasks: Vec<String>,
    pub ids: Vec<String>,
    pub batch: Batch,
}

pub const PAD: &str = "<pad>";

/// Tokenize, truncate or pad every document to `seq_len` tokens and label
/// it with the index of its task tag among the sorted tags.
pub fn tokenize_corpus(corpus: &Corpus, seq_len: usize) -> Result<TokenizedCorpus> {
    let tasks = corpus.tasks();
    if tasks.is_empty() {
        return Err(Error::usage(
            "training documents need task tags to serve as labels",
        ));
    }
    let mut vocab = BTreeMap::from([(PAD.to_string(), 0)]);
    let mut terms: Vec<String> = corpus
        .documents()
        .iter()
        .flat_map(|d| tokenize(&d.text))
        .collect();
    terms.sort();
    terms.dedup();
    for t in terms {
        let next = vocab.len();
        vocab.entry(t).or_insert(next);
    }
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    for doc in corpus.documents() {
        let task = doc
            .task
            .as_ref()
            .ok_or_else(|| Error::usage(format!("document {:?} has no task tag", doc.id)))?;
        let mut seq: Vec<usize> = tokenize(&doc.text)
            .iter()
            .take(seq_len)
            .map(|t| vocab[t])
            .collect();
        seq.resize(seq_len, 0);
        seqs.push(seq);
        labels.push(tasks.iter().position(|t| t == task).expect("task listed"));
    }
    let ids = corpus.documents().iter().map(|d| d.id.clone()).collect();
    Ok(TokenizedCorpus {
        vocab,
        tasks,
        ids,
        batch: Batch::tokens(seqs, labels)?,
    })
}

/// Deterministic split into training and held-out samples.
pub fn split_batch(batch: &Batch, eval_fraction: f64, seed: u64) -> Result<TrainData> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::usage("need at least two samples to hold some out"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).derive(0x5_9117).shuffle(&mut idx);
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    let (eval, train) = idx.split_at(n_eval);
    Ok(TrainData {
        train: batch.select(train)?,
        eval: batch.select(eval)?,
    })
}

/// The frozen base model, attached adapters and data a config describes.
pub struct PreparedRun {
    pub model: ToyModel,
    pub data: TrainData,
    pub corpus: TokenizedCorpus,
    pub experts: usize,
}

pub fn prepare(cfg: &TrainConfig) -> Result<PreparedRun> {
    cfg.validate()?;
    let corpus = tokenize_corpus(&cfg.corpus()?, cfg.model.seq_len)?;
    let data = split_batch(&corpus.batch, cfg.eval_fraction, cfg.seed)?;
    let spec = ModelSpec::Attention {
        vocab: corpus.vocab.len(),
        d_model: cfg.model.d_model,
        classes: corpus.tasks.len(),
        layers: cfg.model.layers,
    };
    let mut model =
        pretrained_attention(spec, cfg.model.seq_len, cfg.model.pretrain_steps, cfg.seed)?;
    let experts = cfg.resolved_experts()?;
    if let Some(scheme) = cfg.scheme.adapter_scheme() {
        let adapter = AdapterConfig {
            scheme,
            rank: cfg.rank.expect("validated"),
            count: experts,
            alpha: cfg.alpha,
        };
        let mut rng = SeededRng::new(cfg.seed).derive(2);
        for point in spec.adaptable_points() {
            model.attach(&point, &adapter, &mut rng)?;
        }
    }
    Ok(PreparedRun {
        model,
        data,
        corpus,
        experts,
    })
}

pub struct TrainRun {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    pub model: ToyModel,
}

/// Train the run a config describes and package its checkpoint.
pub fn run_config(cfg: &TrainConfig) -> Result<TrainRun> {
    let PreparedRun {
        mut model,
        data,
        experts,
        ..
    } = prepare(cfg)?;
    let report = train(&mut model, &data, &cfg.options())?;
    let mut checkpoint = model.to_checkpoint(cfg.scheme == TrainScheme::Full);
    checkpoint.set_meta("train.scheme", cfg.scheme.as_str());
    checkpoint.set_meta("train.seed", cfg.seed.to_string());
    checkpoint.set_meta("train.steps", cfg.steps.to_string());
    checkpoint.set_meta("train.experts", experts.to_string());
    Ok(TrainRun {
        report,
        checkpoint,
        model,
    })
}

// ---------------------------------------------------------------------------
// Synthetic regression fixtures

/// `m` orthonormal vectors in `R^n` by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_vectors(n: usize, m: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    assert!(m <= n, "cannot fit {m} orthonormal vectors in R^{n}");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(m);
    while out.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &out {
                let c = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, ui)| *x -= c * ui);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// `sum_i s_i u_i v_i^T`.
fn outer_sum(us: &[Vec<f64>], vs: &[Vec<f64>], scales: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(us[0].len(), vs[0].len());
    for ((u, v), s) in us.iter().zip(vs).zip(scales) {
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                m.set(i, j, m.get(i, j) + s * ui * vj);
            }
        }
    }
    m
}

/// A frozen dense regression base plus train and eval data.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFixture {
    pub model: ToyModel,
    pub data: TrainData,
}

fn regression_model(d: usize, k: usize, rng: &mut SeededRng) -> Result<ToyModel> {
    ToyModel::new(
        ModelSpec::Dense {
            input_dim: k,
            hidden_dim: d,
            classes: None,
            relu: false,
        },
        rng,
    )
}

/// Samples `y = (W0 + delta[task]) x + noise` with the given inputs.
fn labeled(
    model: &ToyModel,
    xs: &[Vec<f64>],
    tasks: &[usize],
    deltas: &[Matrix],
    noise: f64,
    rng: &mut SeededRng,
) -> Result<Batch> {
    let w0 = &model.base()["layer0.fc"];
    let ys: Vec<Vec<f64>> = xs
        .iter()
        .zip(tasks)
        .map(|(x, &t)| {
            let w = w0.add(&deltas[t])?;
            Ok(w.matvec(x)?
                .into_iter()
                .map(|y| y + noise * rng.normal())
                .collect())
        })
        .collect::<Result<_>>()?;
    Batch::regression(Matrix::from_rows(xs)?, Matrix::from_rows(&ys)?)?.with_tasks(tasks.to_vec())
}

fn gaussian_inputs(n: usize, k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..k).map(|_| rng.normal()).collect())
        .collect()
}

/// Least-squares task whose true update has rank 2 (`d = k = 8`).
pub fn least_squares_fixture(seed: u64) -> Result<RegressionFixture> {
    let (d, k, n) = (8, 8, 64);
    let mut rng = SeededRng::new(seed);
    let model = regression_model(d, k, &mut rng)?;
    let us = orthonormal_vectors(d, 2, &mut rng);
    let vs = orthonormal_vectors(k, 2, &mut rng);
    let delta = outer_sum(&us, &vs, &[1.5, 0.8]);
    let xs = gaussian_inputs(n, k, &mut rng);
    let batch = labeled(&model, &xs, &vec![0; n], &[delta], 0.05, &mut rng)?;
    Ok(RegressionFixture {
        model,
        data: TrainData {
            train: batch.clone(),
            eval: batch,
        },
    })
}

/// Two tasks sharing one input distribution whose target updates have
/// rank `rank` each and act on mutually orthogonal subspaces. With
/// `homogeneous` both tasks use the first update.
pub fn interference_fixture(
    seed: u64,
    d: usize,
    rank: usize,
    homogeneous: bool,
) -> Result<RegressionFixture> {
    let mut rng = SeededRng::new(seed);
    let model = regression_model(d, d, &mut rng)?;
    let us = orthonormal_vectors(d, 2 * rank, &mut rng);
    let vs = orthonormal_vectors(d, 2 * rank, &mut rng);
    let scales: Vec<f64> = (0..2 * rank).map(|_| rng.uniform_in(1.0, 2.0)).collect();
    let first = outer_sum(&us[..rank], &vs[..rank], &scales[..rank]);
    let second = if homogeneous {
        first.clone()
    } else {
        outer_sum(&us[rank..], &vs[rank..], &scales[rank..])
    };
    let deltas = [first, second];
    let batch = |n: usize, rng: &mut SeededRng| {
        let xs = gaussian_inputs(n, d, rng);
        let tasks: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labeled(&model, &xs, &tasks, &deltas, 0.0, rng)
    };
    let train = batch(256, &mut rng)?;
    let eval = batch(128, &mut rng)?;
    Ok(RegressionFixture {
        model: model.clone().with_task_dedicated_heads(true),
        data: TrainData { train, eval },
    })
}

// ---------------------------------------------------------------------------
// Observation I: one wide adapter against task-dedicated narrow heads

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs1Config {
    pub single: AdapterConfig,
    pub split: AdapterConfig,
    pub dim: usize,
    pub homogeneous: bool,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Obs1Config {
    fn default() -> Self {
        Obs1Config {
            single: AdapterConfig::lora(8),
            split: AdapterConfig::split(4, 2),
            dim: 16,
            homogeneous: false,
            steps: 300,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs1Row {
    pub seed: u64,
    pub single_loss: f64,
    pub split_loss: f64,
    pub split_wins: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs1Report {
    pub params: usize,
    pub rows: Vec<Obs1Row>,
    pub wins: usize,
}

/// Train both configurations on the two-task fixture for every seed and
/// compare their final eval losses. The two configurations must have the
/// same trainable parameter count.
pub fn run_observation1(seeds: &[u64], cfg: &Obs1Config) -> Result<Obs1Report> {
    let mut probe = SeededRng::new(0);
    let single_params = cfg
        .single
        .build(cfg.dim, cfg.dim, &mut probe)?
        .trainable_params();
    let split_params = cfg
        .split
        .build(cfg.dim, cfg.dim, &mut probe)?
        .trainable_params();
    if single_params != split_params {
        return Err(Error::usage(format!(
            "configurations differ in trainable parameters ({single_params} vs {split_params})"
        )));
    }
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let fx = interference_fixture(seed, cfg.dim, cfg.split.rank, cfg.homogeneous)?;
            let loss = |adapter: &AdapterConfig| -> Result<f64> {
                let mut m = fx.model.clone();
                m.attach("layer0.fc", adapter, &mut SeededRng::new(seed).derive(3))?;
                let mut opts = TrainOptions::new(
                    adapter.scheme.into(),
                    cfg.learning_rate,
                    cfg.steps,
                    cfg.batch_size,
                    seed,
                );
                opts.train_head = false;
                Ok(train(&mut m, &fx.data, &opts)?.final_loss)
            };
            let single_loss = loss(&cfg.single)?;
            let split_loss = loss(&cfg.split)?;
            Ok(Obs1Row {
                seed,
                single_loss,
                split_loss,
                split_wins: split_loss < single_loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = rows.iter().filter(|r| r.split_wins).count();
    Ok(Obs1Report {
        params: single_params,
        rows,
        wins,
    })
}

// ---------------------------------------------------------------------------
// Observation II: A factors converge, B factors diverge

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs2Config {
    pub tasks: usize,
    pub rank: usize,
    pub dim: usize,
    /// Every task reuses the first task's target and data.
    pub identical_tasks: bool,
    /// Zero skips training.
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for Obs2Config {
    fn default() -> Self {
        Obs2Config {
            tasks: 3,
            rank: 4,
            dim: 16,
            identical_tasks: false,
            steps: 200,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs2Row {
    pub seed: u64,
    pub separation: Separation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs2Report {
    pub rows: Vec<Obs2Row>,
    /// Seeds with `D_B / D_A > 1`.
    pub wins: usize,
}

/// Train one LoRA per task from the same base and the same A
/// initialization, then compare the spread of the A and B factors.
pub fn run_observation2(seeds: &[u64], cfg: &Obs2Config) -> Result<Obs2Report> {
    if cfg.tasks < 2 || seeds.len() < 2 {
        return Err(Error::usage(
            "observation II needs at least two tasks and two seeds",
        ));
    }
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let adapters = obs2_adapters(seed, cfg)?;
            let (a, b): (Vec<&Matrix>, Vec<&Matrix>) = adapters
                .iter()
                .map(|ad| match ad {
                    Adapter::Lora(l) => (l.a(), l.b()),
                    _ => unreachable!("observation II trains LoRA adapters"),
                })
                .unzip();
            Ok(Obs2Row {
                seed,
                separation: separation(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = rows.iter().filter(|r| r.separation.ratio > 1.0).count();
    Ok(Obs2Report { rows, wins })
}

/// The per-task adapters of one observation II seed.
pub fn obs2_adapters(seed: u64, cfg: &Obs2Config) -> Result<Vec<Adapter>> {
    let mut rng = SeededRng::new(seed);
    let base = regression_model(cfg.dim, cfg.dim, &mut rng)?;
    let xs = gaussian_inputs(128, cfg.dim, &mut rng);
    let mut out = Vec::with_capacity(cfg.tasks);
    let mut first: Option<Matrix> = None;
    for t in 0..cfg.tasks {
        let mut task_rng = SeededRng::new(seed).derive(100 + t as u64);
        let delta = match (&first, cfg.identical_tasks) {
            (Some(d), true) => d.clone(),
            _ => {
                let us = orthonormal_vectors(cfg.dim, cfg.rank, &mut task_rng);
                let vs = orthonormal_vectors(cfg.dim, cfg.rank, &mut task_rng);
                let scales: Vec<f64> = (0..cfg.rank)
                    .map(|_| task_rng.uniform_in(1.0, 2.0))
                    .collect();
                outer_sum(&us, &vs, &scales)
            }
        };
        first.get_or_insert_with(|| delta.clone());
        let batch = labeled(&base, &xs, &vec![0; xs.len()], &[delta], 0.0, &mut task_rng)?;
        let mut model = base.clone();
        model.attach(
            "layer0.fc",
            &AdapterConfig::lora(cfg.rank),
            &mut SeededRng::new(seed).derive(7),
        )?;
        if cfg.steps > 0 {
            let mut opts = TrainOptions::new(
                TrainScheme::Lora,
                cfg.learning_rate,
                cfg.steps,
                cfg.batch_size,
                seed,
            );
            opts.train_head = false;
            train(
                &mut model,
                &TrainData {
                    train: batch.clone(),
                    eval: batch,
                },
                &opts,
            )?;
        }
        out.push(model.adapter("layer0.fc").expect("attached").clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Heterogeneity: full fine-tuning against LoRA as components are mixed in

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HetConfig {
    /// Component counts, increasing.
    pub levels: Vec<usize>,
    pub lora_rank: usize,
    /// Rank of each component's update.
    pub component_rank: usize,
    /// Input dimensions per component.
    pub component_dim: usize,
    pub samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub fft_learning_rate: f64,
    pub batch_size: usize,
}

impl Default for HetConfig {
    fn default() -> Self {
        HetConfig {
            levels: vec![1, 2, 4, 8],
            lora_rank: 4,
            component_rank: 2,
            component_dim: 4,
            samples: 256,
            steps: 300,
            learning_rate: 0.05,
            fft_learning_rate: 0.2,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HetRow {
    pub level: usize,
    /// `1 - final eval loss / initial eval loss`.
    pub fft_metric: f64,
    pub peft_metric: f64,
    pub gap: f64,
}

/// Gap between full fine-tuning and LoRA at every mixing level. Level `L`
/// mixes `L` components, each confined to its own input subspace with its
/// own low-rank update.
pub fn run_heterogeneity(seed: u64, cfg: &HetConfig) -> Result<Vec<HetRow>> {
    if cfg.levels.is_empty() || cfg.levels.windows(2).any(|w| w[0] >= w[1]) || cfg.levels[0] == 0 {
        return Err(Error::usage(
            "heterogeneity levels must be positive and strictly increasing",
        ));
    }
    let max = *cfg.levels.last().expect("non-empty");
    let dim = max * cfg.component_dim;
    let mut rng = SeededRng::new(seed);
    let base = regression_model(dim, dim, &mut rng)?;
    let inputs = orthonormal_vectors(dim, dim, &mut rng);
    let deltas: Vec<Matrix> = (0..max)
        .map(|c| {
            let block = &inputs[c * cfg.component_dim..(c + 1) * cfg.component_dim];
            let mut mix = SeededRng::new(seed).derive(200 + c as u64);
            let vs: Vec<Vec<f64>> =
                orthonormal_vectors(cfg.component_dim, cfg.component_rank, &mut mix)
                    .iter()
                    .map(|w| {
                        (0..dim)
                            .map(|j| block.iter().zip(w).map(|(b, wi)| wi * b[j]).sum())
                            .collect()
                    })
                    .collect();
            let us = orthonormal_vectors(dim, cfg.component_rank, &mut mix);
            let scales: Vec<f64> = (0..cfg.component_rank)
                .map(|_| mix.uniform_in(1.0, 2.0))
                .collect();
            outer_sum(&us, &vs, &scales)
        })
        .collect();

    cfg.levels
        .iter()
        .map(|&level| {
            let mut data_rng = SeededRng::new(seed).derive(300 + level as u64);
            let sample = |n: usize, rng: &mut SeededRng| {
                let comps: Vec<usize> = (0..n).map(|i| i % level).collect();
                let xs: Vec<Vec<f64>> = comps
                    .iter()
                    .map(|&c| {
                        let block = &inputs[c * cfg.component_dim..(c + 1) * cfg.component_dim];
                        let z: Vec<f64> = (0..cfg.component_dim).map(|_| rng.normal()).collect();
                        (0..dim)
                            .map(|j| block.iter().zip(&z).map(|(b, zi)| zi * b[j]).sum())
                            .collect()
                    })
                    .collect();
                labeled(&base, &xs, &comps, &deltas, 0.0, rng)
            };
            let data = TrainData {
                train: sample(cfg.samples, &mut data_rng)?,
                eval: sample(cfg.samples / 2, &mut data_rng)?,
            };
            let metric = |r: &TrainReport| 1.0 - r.final_loss / r.initial_loss;

            let mut fft = base.clone();
            let fft_report = train(
                &mut fft,
                &data,
                &TrainOptions::new(
                    TrainScheme::Full,
                    cfg.fft_learning_rate,
                    cfg.steps,
                    cfg.batch_size,
                    seed,
                ),
            )?;
            let mut peft = base.clone();
            peft.attach(
                "layer0.fc",
                &AdapterConfig::lora(cfg.lora_rank),
                &mut SeededRng::new(seed).derive(4),
            )?;
            let peft_report = train(
                &mut peft,
                &data,
                &TrainOptions::new(
                    TrainScheme::Lora,
                    cfg.learning_rate,
                    cfg.steps,
                    cfg.batch_size,
                    seed,
                ),
            )?;
            let (fft_metric, peft_metric) = (metric(&fft_report), metric(&peft_report));
            Ok(HetRow {
                level,
                fft_metric,
                peft_metric,
                gap: fft_metric - peft_metric,
            })
        })
        .collect()
}

/// [`run_heterogeneity`] for several seeds.
pub fn run_heterogeneity_seeds(seeds: &[u64], cfg: &HetConfig) -> Result<Vec<(u64, Vec<HetRow>)>> {
    seeds
        .par_iter()
        .map(|&s| Ok((s, run_heterogeneity(s, cfg)?)))
        .collect()
}
