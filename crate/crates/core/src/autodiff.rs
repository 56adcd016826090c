//! A small reverse-mode tape over a closed set of matrix primitives.
//!
//! Nodes are evaluated eagerly as they are recorded, so the tape always
//! holds a complete forward pass. Leaves are inputs (constants), frozen
//! weights, or trainable parameters; only trainable leaves ever receive a
//! gradient from [`Tape::backward`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, matmul, softmax_unchecked, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(usize);

impl SlotId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Frozen,
    Trainable,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(SlotId, SlotId),
    Transpose(SlotId),
    Add(SlotId, SlotId),
    Scale(SlotId, f64),
    Relu(SlotId),
    SoftmaxRows(SlotId),
    /// `out[t, j] = x[t, j] * gates[t, column]`
    ScaleRowsByColumn {
        x: SlotId,
        gates: SlotId,
        column: usize,
    },
    SumAll(SlotId),
    HalfSquaredNorm(SlotId),
    /// `1 / (2 * rows) * sum ||pred_t - target_t||^2`
    MeanSquaredError {
        pred: SlotId,
        target: Matrix,
    },
    /// Mean over rows of `-log softmax(logits_t)[label_t]`.
    SoftmaxCrossEntropy {
        logits: SlotId,
        labels: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    name: Option<String>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of the trainable leaves, keyed by slot.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<SlotId, Matrix>,
    names: BTreeMap<String, SlotId>,
}

impl Gradients {
    pub fn get(&self, slot: SlotId) -> Option<&Matrix> {
        self.grads.get(&slot)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.names.get(name).and_then(|s| self.grads.get(s))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Named gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|(n, s)| (n.as_str(), &self.grads[s]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotId, &Matrix)> {
        self.grads.iter().map(|(s, g)| (*s, g))
    }
}

/// Finite-difference comparison for every trainable leaf.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradReport {
    pub eps: f64,
    /// Relative error `‖g_ad - g_fd‖ / (‖g_ad‖ + ‖g_fd‖)` over the sampled
    /// coordinates of each parameter (named, or `slot<N>`).
    pub per_parameter: BTreeMap<String, f64>,
    /// Worst single-coordinate `|g_ad - g_fd| / (|g_ad| + |g_fd|)`. Dominated
    /// by rounding noise on coordinates whose gradient is near zero.
    pub worst_coordinate: f64,
    pub coordinates_checked: usize,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_parameter.values().copied().fold(0.0, f64::max)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by the `matmul` nodes recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, slot: SlotId) -> &Matrix {
        &self.nodes[slot.0].value
    }

    pub fn scalar(&self, slot: SlotId) -> f64 {
        self.nodes[slot.0].value.data()[0]
    }

    pub fn slot_by_name(&self, name: &str) -> Option<SlotId> {
        self.nodes
            .iter()
            .position(|n| n.name.as_deref() == Some(name))
            .map(SlotId)
    }

    fn push(&mut self, op: Op, value: Matrix, name: Option<String>) -> SlotId {
        let needs_grad = match &op {
            Op::Leaf(kind) => *kind == LeafKind::Trainable,
            other => inputs(other).iter().any(|s| self.nodes[s.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            name,
            needs_grad,
        });
        SlotId(self.nodes.len() - 1)
    }

    fn check_slot(&self, slot: SlotId) -> Result<()> {
        if slot.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "slot {} is not on this tape",
                slot.0
            )));
        }
        Ok(())
    }

    pub fn input(&mut self, value: Matrix) -> SlotId {
        self.push(Op::Leaf(LeafKind::Input), value, None)
    }

    pub fn frozen(&mut self, name: impl Into<String>, value: Matrix) -> SlotId {
        self.push(Op::Leaf(LeafKind::Frozen), value, Some(name.into()))
    }

    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> SlotId {
        self.push(Op::Leaf(LeafKind::Trainable), value, Some(name.into()))
    }

    /// Leaf with the given kind.
    pub fn leaf(&mut self, kind: LeafKind, name: impl Into<String>, value: Matrix) -> SlotId {
        self.push(Op::Leaf(kind), value, Some(name.into()))
    }

    pub fn matmul(&mut self, a: SlotId, b: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        self.check_slot(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = matmul(va, vb)?;
        self.macs += (va.rows() * va.cols() * vb.cols()) as u64;
        Ok(self.push(Op::MatMul(a, b), value, None))
    }

    pub fn transpose(&mut self, a: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        let value = self.value(a).transpose();
        Ok(self.push(Op::Transpose(a), value, None))
    }

    pub fn add(&mut self, a: SlotId, b: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        self.check_slot(b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, None))
    }

    pub fn scale(&mut self, a: SlotId, s: f64) -> Result<SlotId> {
        self.check_slot(a)?;
        let value = self.value(a).scale(s);
        Ok(self.push(Op::Scale(a, s), value, None))
    }

    pub fn relu(&mut self, a: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        let value = self.value(a).map(|v| v.max(0.0));
        Ok(self.push(Op::Relu(a), value, None))
    }

    pub fn softmax_rows(&mut self, a: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        let value = softmax_rows(self.value(a));
        Ok(self.push(Op::SoftmaxRows(a), value, None))
    }

    pub fn scale_rows_by_column(
        &mut self,
        x: SlotId,
        gates: SlotId,
        column: usize,
    ) -> Result<SlotId> {
        self.check_slot(x)?;
        self.check_slot(gates)?;
        let (vx, vg) = (self.value(x), self.value(gates));
        if vx.rows() != vg.rows() || column >= vg.cols() {
            return Err(Error::shape(format!(
                "scale_rows_by_column: {}x{} by column {column} of {}x{}",
                vx.rows(),
                vx.cols(),
                vg.rows(),
                vg.cols()
            )));
        }
        let value = scale_rows(vx, vg, column);
        Ok(self.push(Op::ScaleRowsByColumn { x, gates, column }, value, None))
    }

    pub fn sum_all(&mut self, a: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        let value = Matrix::filled(1, 1, self.value(a).sum());
        Ok(self.push(Op::SumAll(a), value, None))
    }

    pub fn half_squared_norm(&mut self, a: SlotId) -> Result<SlotId> {
        self.check_slot(a)?;
        let v = self.value(a);
        let value = Matrix::filled(1, 1, 0.5 * compensated_sum(v.data().iter().map(|x| x * x)));
        Ok(self.push(Op::HalfSquaredNorm(a), value, None))
    }

    pub fn mean_squared_error(&mut self, pred: SlotId, target: Matrix) -> Result<SlotId> {
        self.check_slot(pred)?;
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mean_squared_error: prediction {}x{} vs target {}x{}",
                vp.rows(),
                vp.cols(),
                target.rows(),
                target.cols()
            )));
        }
        let value = Matrix::filled(1, 1, mse(vp, &target));
        Ok(self.push(Op::MeanSquaredError { pred, target }, value, None))
    }

    pub fn softmax_cross_entropy(&mut self, logits: SlotId, labels: &[usize]) -> Result<SlotId> {
        self.check_slot(logits)?;
        let vl = self.value(logits);
        if labels.len() != vl.rows() {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: {} labels for {} rows",
                labels.len(),
                vl.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= vl.cols()) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                vl.cols()
            )));
        }
        let value = Matrix::filled(1, 1, cross_entropy(vl, labels));
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            None,
        ))
    }

    /// Replace a leaf's value. Call [`Tape::recompute`] afterwards.
    pub fn set_leaf(&mut self, slot: SlotId, value: Matrix) -> Result<()> {
        self.check_slot(slot)?;
        let node = &mut self.nodes[slot.0];
        if !matches!(node.op, Op::Leaf(_)) {
            return Err(Error::contract("set_leaf on a non-leaf slot"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf with a different shape"));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluate every non-leaf node in recording order.
    pub fn recompute(&mut self) {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf(_) => continue,
                Op::MatMul(a, b) => {
                    matmul(self.value(*a), self.value(*b)).expect("shapes fixed at record time")
                }
                Op::Transpose(a) => self.value(*a).transpose(),
                Op::Add(a, b) => self
                    .value(*a)
                    .add(self.value(*b))
                    .expect("shapes fixed at record time"),
                Op::Scale(a, s) => self.value(*a).scale(*s),
                Op::Relu(a) => self.value(*a).map(|v| v.max(0.0)),
                Op::SoftmaxRows(a) => softmax_rows(self.value(*a)),
                Op::ScaleRowsByColumn { x, gates, column } => {
                    scale_rows(self.value(*x), self.value(*gates), *column)
                }
                Op::SumAll(a) => Matrix::filled(1, 1, self.value(*a).sum()),
                Op::HalfSquaredNorm(a) => Matrix::filled(
                    1,
                    1,
                    0.5 * compensated_sum(self.value(*a).data().iter().map(|x| x * x)),
                ),
                Op::MeanSquaredError { pred, target } => {
                    Matrix::filled(1, 1, mse(self.value(*pred), target))
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    Matrix::filled(1, 1, cross_entropy(self.value(*logits), labels))
                }
            };
            self.nodes[i].value = value;
        }
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// trainable leaf. Frozen and input leaves are never given gradients.
    pub fn backward(&self, loss: SlotId) -> Result<Gradients> {
        self.check_slot(loss)?;
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::contract(format!(
                "loss must be a 1x1 scalar, got {r}x{c}"
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf(_)) {
                continue;
            }
            let Some(d) = adj[i].take() else { continue };
            match &node.op {
                Op::Leaf(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let g = matmul(&d, &self.value(*b).transpose())?;
                        accumulate(&mut adj, *a, g);
                    }
                    if self.nodes[b.0].needs_grad {
                        let g = matmul(&self.value(*a).transpose(), &d)?;
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, d.transpose()),
                Op::Add(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, d.clone());
                    }
                    accumulate(&mut adj, *a, d);
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, d.scale(*s)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = d;
                    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = d;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row_mut(r);
                        let inner: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - inner);
                        }
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::ScaleRowsByColumn { x, gates, column } => {
                    let (vx, vg) = (self.value(*x), self.value(*gates));
                    if self.nodes[gates.0].needs_grad {
                        let mut g = Matrix::zeros(vg.rows(), vg.cols());
                        for t in 0..vx.rows() {
                            let s: f64 = d.row(t).iter().zip(vx.row(t)).map(|(a, b)| a * b).sum();
                            g.set(t, *column, s);
                        }
                        accumulate(&mut adj, *gates, g);
                    }
                    if self.nodes[x.0].needs_grad {
                        accumulate(&mut adj, *x, scale_rows(&d, vg, *column));
                    }
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, d.data()[0]));
                }
                Op::HalfSquaredNorm(a) => {
                    let g = self.value(*a).scale(d.data()[0]);
                    accumulate(&mut adj, *a, g);
                }
                Op::MeanSquaredError { pred, target } => {
                    let vp = self.value(*pred);
                    let s = d.data()[0] / vp.rows() as f64;
                    let g = vp.sub(target)?.scale(s);
                    accumulate(&mut adj, *pred, g);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let z = self.value(*logits);
                    let s = d.data()[0] / z.rows() as f64;
                    let mut g = softmax_rows(z);
                    for (t, &label) in labels.iter().enumerate() {
                        let row = g.row_mut(t);
                        row[label] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= s;
                        }
                    }
                    accumulate(&mut adj, *logits, g);
                }
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf(LeafKind::Trainable) = node.op {
                let (r, c) = node.value.shape();
                let g = adj[i].take().unwrap_or_else(|| Matrix::zeros(r, c));
                out.grads.insert(SlotId(i), g);
                if let Some(name) = &node.name {
                    out.names.insert(name.clone(), SlotId(i));
                }
            }
        }
        Ok(out)
    }

    /// Trainable leaves in recording order.
    pub fn trainable_slots(&self) -> Vec<SlotId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf(LeafKind::Trainable)))
            .map(|(i, _)| SlotId(i))
            .collect()
    }
}

fn inputs(op: &Op) -> Vec<SlotId> {
    match op {
        Op::Leaf(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) => vec![*a, *b],
        Op::ScaleRowsByColumn { x, gates, .. } => vec![*x, *gates],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::SoftmaxRows(a)
        | Op::SumAll(a)
        | Op::HalfSquaredNorm(a) => {
            vec![*a]
        }
        Op::MeanSquaredError { pred, .. } => vec![*pred],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

fn accumulate(adj: &mut [Option<Matrix>], slot: SlotId, g: Matrix) {
    match &mut adj[slot.0] {
        Some(existing) => existing.axpy(1.0, &g).expect("gradient shapes match"),
        empty @ None => *empty = Some(g),
    }
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax_unchecked(m.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

fn scale_rows(x: &Matrix, gates: &Matrix, column: usize) -> Matrix {
    let mut out = x.clone();
    for t in 0..x.rows() {
        let g = gates.get(t, column);
        for v in out.row_mut(t) {
            *v *= g;
        }
    }
    out
}

fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let ss = compensated_sum(
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t)),
    );
    ss / (2.0 * pred.rows() as f64)
}

fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let total = compensated_sum(labels.iter().enumerate().map(|(t, &label)| {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + compensated_sum(row.iter().map(|v| (v - max).exp())).ln();
        lse - row[label]
    }));
    total / labels.len() as f64
}

/// Coordinates sampled per parameter by [`grad_check`].
pub const GRAD_CHECK_COORDS: usize = 32;

/// Central-difference check of `tape.backward(loss)`.
///
/// For every trainable leaf, up to [`GRAD_CHECK_COORDS`] coordinates (all of
/// them for small tensors) are perturbed by `±eps` and the loss is
/// re-evaluated. Errors are reported per parameter as the norm of the
/// difference over the norm sum, each denominator floored at 1e-12.
/// The tape is restored to its original values before returning.
pub fn grad_check(
    tape: &mut Tape,
    loss: SlotId,
    rng: &mut SeededRng,
    eps: f64,
) -> Result<GradReport> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::contract(format!(
            "grad_check eps must be in (0, 1e-3], got {eps}"
        )));
    }
    let grads = tape.backward(loss)?;
    let mut report = GradReport {
        eps,
        per_parameter: BTreeMap::new(),
        worst_coordinate: 0.0,
        coordinates_checked: 0,
    };

    for slot in tape.trainable_slots() {
        if slot.0 > loss.0 {
            continue;
        }
        let original = tape.value(slot).clone();
        if !original.is_finite() {
            return Err(Error::contract("grad_check on non-finite parameters"));
        }
        let analytic = grads
            .get(slot)
            .expect("every trainable slot has a gradient");
        let mut coords: Vec<usize> = (0..original.len()).collect();
        if coords.len() > GRAD_CHECK_COORDS {
            rng.shuffle(&mut coords);
            coords.truncate(GRAD_CHECK_COORDS);
            coords.sort_unstable();
        }

        let (mut diff_sq, mut ad_sq, mut fd_sq) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let theta = original.data()[c];
            let plus = theta + eps;
            let minus = theta - eps;
            let mut perturbed = original.clone();

            perturbed.data_mut()[c] = plus;
            tape.set_leaf(slot, perturbed.clone())?;
            tape.recompute();
            let f_plus = tape.scalar(loss);

            perturbed.data_mut()[c] = minus;
            tape.set_leaf(slot, perturbed)?;
            tape.recompute();
            let f_minus = tape.scalar(loss);

            // divide by the representable step, not 2*eps
            let fd = (f_plus - f_minus) / (plus - minus);
            let ad = analytic.data()[c];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-12);
            report.worst_coordinate = report.worst_coordinate.max(rel);
            diff_sq += (ad - fd) * (ad - fd);
            ad_sq += ad * ad;
            fd_sq += fd * fd;
        }
        let worst = f64::sqrt(diff_sq) / (f64::sqrt(ad_sq) + f64::sqrt(fd_sq)).max(1e-12);
        tape.set_leaf(slot, original)?;
        tape.recompute();

        report.coordinates_checked += coords.len();
        let name = tape.nodes[slot.0]
            .name
            .clone()
            .unwrap_or_else(|| format!("slot{}", slot.0));
        let entry = report.per_parameter.entry(name).or_insert(0.0);
        *entry = entry.max(worst);
    }
    Ok(report)
}
