//! Low-rank adapters attached to a frozen weight `W0 (d x k)`.
//!
//! * [`LoraAdapter`]: `y = W0 x + (alpha / r) B A x`.
//! * [`SplitAdapter`]: `n` independent LoRA pairs whose updates are summed.
//! * [`HydraAdapter`]: one shared `A`, `N` expert `B` matrices and a router
//!   `W_g (r x N)`. The router sees the rank-`r` projection `z = A x`:
//!   `y = W0 x + (alpha / r) sum_i w_i B_i z` with `w = softmax(W_gᵀ z)`.
//!
//! Every scheme is constructed with all `B` matrices zero, so a fresh
//! adapter reproduces the frozen base output exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{LeafKind, SlotId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, softmax, Matrix, SeededRng};

/// Multiplier applied to the Kaiming draw for fresh router weights.
pub const ROUTER_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Lora,
    Split,
    Hydra,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Lora => "lora",
            Scheme::Split => "split",
            Scheme::Hydra => "hydra",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(Scheme::Lora),
            "split" | "lora-split" => Ok(Scheme::Split),
            "hydra" => Ok(Scheme::Hydra),
            other => Err(Error::usage(format!(
                "unknown adapter scheme {other:?} (expected lora, split or hydra)"
            ))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn check_rank(d: usize, k: usize, r: usize) -> Result<()> {
    if d == 0 || k == 0 {
        return Err(Error::invariant(format!(
            "adapted weight must be non-empty, got {d}x{k}"
        )));
    }
    if r == 0 || r > d.min(k) {
        return Err(Error::invariant(format!(
            "rank {r} outside 1..={} for a {d}x{k} weight",
            d.min(k)
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    /// Fresh adapter: `A` Kaiming-uniform, `B` zero.
    pub fn new(d: usize, k: usize, r: usize, alpha: f64, rng: &mut SeededRng) -> Result<Self> {
        check_rank(d, k, r)?;
        let a = kaiming_uniform(r, k, rng)?;
        Ok(LoraAdapter {
            a,
            b: Matrix::zeros(d, r),
            alpha,
        })
    }

    pub fn from_parts(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let r = a.rows();
        if b.cols() != r {
            return Err(Error::shape(format!(
                "LoRA B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        check_rank(b.rows(), a.cols(), r)?;
        Ok(LoraAdapter { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(alpha / r) B (A x)`.
    pub fn delta(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.a.matvec(x)?;
        let s = self.scale();
        Ok(self.b.matvec(&z)?.into_iter().map(|v| s * v).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAdapter {
    heads: Vec<LoraAdapter>,
}

impl SplitAdapter {
    pub fn new(
        d: usize,
        k: usize,
        r: usize,
        n: usize,
        alpha: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::invariant("split adapter needs at least one head"));
        }
        let heads = (0..n)
            .map(|_| LoraAdapter::new(d, k, r, alpha, rng))
            .collect::<Result<_>>()?;
        Ok(SplitAdapter { heads })
    }

    pub fn from_heads(heads: Vec<LoraAdapter>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::invariant("split adapter needs at least one head"))?;
        let dims = (first.out_dim(), first.in_dim(), first.rank());
        if heads
            .iter()
            .any(|h| (h.out_dim(), h.in_dim(), h.rank()) != dims)
        {
            return Err(Error::invariant("split heads must share (d, k, r)"));
        }
        Ok(SplitAdapter { heads })
    }

    pub fn heads(&self) -> &[LoraAdapter] {
        &self.heads
    }

    pub fn rank(&self) -> usize {
        self.heads[0].rank()
    }

    pub fn out_dim(&self) -> usize {
        self.heads[0].out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.heads[0].in_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HydraAdapter {
    a: Matrix,
    experts: Vec<Matrix>,
    router: Matrix,
    alpha: f64,
}

impl HydraAdapter {
    /// Fresh adapter: shared `A` Kaiming-uniform, every expert zero, router
    /// Kaiming-uniform (fan-in `r`) scaled by [`ROUTER_INIT_SCALE`].
    pub fn new(
        d: usize,
        k: usize,
        r: usize,
        experts: usize,
        alpha: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        check_rank(d, k, r)?;
        if experts == 0 {
            return Err(Error::invariant("hydra adapter needs at least one expert"));
        }
        let a = kaiming_uniform(r, k, rng)?;
        let router = kaiming_uniform(experts, r, rng)?
            .transpose()
            .scale(ROUTER_INIT_SCALE);
        Ok(HydraAdapter {
            a,
            experts: vec![Matrix::zeros(d, r); experts],
            router,
            alpha,
        })
    }

    pub fn from_parts(a: Matrix, experts: Vec<Matrix>, router: Matrix, alpha: f64) -> Result<Self> {
        let r = a.rows();
        let first = experts
            .first()
            .ok_or_else(|| Error::invariant("hydra adapter needs at least one expert"))?;
        let d = first.rows();
        check_rank(d, a.cols(), r)?;
        if experts.iter().any(|b| b.shape() != (d, r)) {
            return Err(Error::shape(format!("every expert must be {d}x{r}")));
        }
        if router.shape() != (r, experts.len()) {
            return Err(Error::shape(format!(
                "router is {}x{}, expected {r}x{}",
                router.rows(),
                router.cols(),
                experts.len()
            )));
        }
        Ok(HydraAdapter {
            a,
            experts,
            router,
            alpha,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn experts(&self) -> &[Matrix] {
        &self.experts
    }

    pub fn router(&self) -> &Matrix {
        &self.router
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

/// Gating scores for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutput {
    pub weights: Vec<f64>,
}

impl GateOutput {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

fn check_base(x: &[f64], w0: &Matrix, d: usize, k: usize) -> Result<()> {
    if w0.shape() != (d, k) {
        return Err(Error::shape(format!(
            "base weight is {}x{} but adapter is {d}x{k}",
            w0.rows(),
            w0.cols()
        )));
    }
    if x.len() != k {
        return Err(Error::shape(format!(
            "input has length {}, expected {k}",
            x.len()
        )));
    }
    Ok(())
}

fn add_into(y: &mut [f64], delta: &[f64]) {
    for (a, b) in y.iter_mut().zip(delta) {
        *a += b;
    }
}

pub fn lora_forward(x: &[f64], w0: &Matrix, ad: &LoraAdapter) -> Result<Vec<f64>> {
    check_base(x, w0, ad.out_dim(), ad.in_dim())?;
    let mut y = w0.matvec(x)?;
    add_into(&mut y, &ad.delta(x)?);
    Ok(y)
}

pub fn split_forward(x: &[f64], w0: &Matrix, ad: &SplitAdapter) -> Result<Vec<f64>> {
    check_base(x, w0, ad.out_dim(), ad.in_dim())?;
    let mut y = w0.matvec(x)?;
    for head in &ad.heads {
        add_into(&mut y, &head.delta(x)?);
    }
    Ok(y)
}

/// `softmax(W_gᵀ z)`.
pub fn route(z: &[f64], router: &Matrix) -> Result<GateOutput> {
    if z.len() != router.rows() {
        return Err(Error::shape(format!(
            "router is {}x{} but input has length {}",
            router.rows(),
            router.cols(),
            z.len()
        )));
    }
    let logits = router.transpose_matvec(z)?;
    Ok(GateOutput {
        weights: softmax(&logits)?,
    })
}

pub fn hydra_forward(x: &[f64], w0: &Matrix, ad: &HydraAdapter) -> Result<(Vec<f64>, GateOutput)> {
    check_base(x, w0, ad.out_dim(), ad.in_dim())?;
    let z = ad.a.matvec(x)?;
    let gate = route(&z, &ad.router)?;
    let mut mixed = vec![0.0; ad.out_dim()];
    for (b, &w) in ad.experts.iter().zip(&gate.weights) {
        for (m, v) in mixed.iter_mut().zip(b.matvec(&z)?) {
            *m += w * v;
        }
    }
    let s = ad.scale();
    let mut y = w0.matvec(x)?;
    for (a, m) in y.iter_mut().zip(mixed) {
        *a += s * m;
    }
    Ok((y, gate))
}

/// Weighted average of the experts for this input, `sum_i w_i(x) B_i`.
pub fn merged_expert(x: &[f64], ad: &HydraAdapter) -> Result<(Matrix, GateOutput)> {
    if x.len() != ad.in_dim() {
        return Err(Error::shape(format!(
            "input has length {}, expected {}",
            x.len(),
            ad.in_dim()
        )));
    }
    let z = ad.a.matvec(x)?;
    let gate = route(&z, &ad.router)?;
    let mut merged = Matrix::zeros(ad.out_dim(), ad.rank());
    for (b, &w) in ad.experts.iter().zip(&gate.weights) {
        merged.axpy(w, b)?;
    }
    Ok((merged, gate))
}

/// Merge-then-apply inference: `W0 x + (alpha / r) B̄ (A x)`.
pub fn merge_infer(x: &[f64], w0: &Matrix, ad: &HydraAdapter) -> Result<Vec<f64>> {
    check_base(x, w0, ad.out_dim(), ad.in_dim())?;
    let (merged, _) = merged_expert(x, ad)?;
    let z = ad.a.matvec(x)?;
    let s = ad.scale();
    let mut y = w0.matvec(x)?;
    for (a, m) in y.iter_mut().zip(merged.matvec(&z)?) {
        *a += s * m;
    }
    Ok(y)
}

/// Any of the three adapter schemes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Adapter {
    Lora(LoraAdapter),
    Split(SplitAdapter),
    Hydra(HydraAdapter),
}

/// Shape of an adapter to construct.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub scheme: Scheme,
    pub rank: usize,
    /// Experts for Hydra, heads for Split; ignored for LoRA.
    pub count: usize,
    /// `None` means `alpha = rank` (unit scale).
    pub alpha: Option<f64>,
}

impl AdapterConfig {
    pub fn lora(rank: usize) -> Self {
        AdapterConfig {
            scheme: Scheme::Lora,
            rank,
            count: 1,
            alpha: None,
        }
    }

    pub fn split(rank: usize, heads: usize) -> Self {
        AdapterConfig {
            scheme: Scheme::Split,
            rank,
            count: heads,
            alpha: None,
        }
    }

    pub fn hydra(rank: usize, experts: usize) -> Self {
        AdapterConfig {
            scheme: Scheme::Hydra,
            rank,
            count: experts,
            alpha: None,
        }
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn build(&self, d: usize, k: usize, rng: &mut SeededRng) -> Result<Adapter> {
        let alpha = self.alpha_value();
        Ok(match self.scheme {
            Scheme::Lora => Adapter::Lora(LoraAdapter::new(d, k, self.rank, alpha, rng)?),
            Scheme::Split => {
                Adapter::Split(SplitAdapter::new(d, k, self.rank, self.count, alpha, rng)?)
            }
            Scheme::Hydra => {
                Adapter::Hydra(HydraAdapter::new(d, k, self.rank, self.count, alpha, rng)?)
            }
        })
    }
}

impl Adapter {
    pub fn scheme(&self) -> Scheme {
        match self {
            Adapter::Lora(_) => Scheme::Lora,
            Adapter::Split(_) => Scheme::Split,
            Adapter::Hydra(_) => Scheme::Hydra,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.rank(),
            Adapter::Split(a) => a.rank(),
            Adapter::Hydra(a) => a.rank(),
        }
    }

    /// Heads for Split, experts for Hydra, 1 for LoRA.
    pub fn count(&self) -> usize {
        match self {
            Adapter::Lora(_) => 1,
            Adapter::Split(a) => a.heads.len(),
            Adapter::Hydra(a) => a.expert_count(),
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Adapter::Lora(a) => a.alpha,
            Adapter::Split(a) => a.heads[0].alpha,
            Adapter::Hydra(a) => a.alpha,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.out_dim(),
            Adapter::Split(a) => a.out_dim(),
            Adapter::Hydra(a) => a.out_dim(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.in_dim(),
            Adapter::Split(a) => a.in_dim(),
            Adapter::Hydra(a) => a.in_dim(),
        }
    }

    pub fn forward(&self, x: &[f64], w0: &Matrix) -> Result<Vec<f64>> {
        match self {
            Adapter::Lora(a) => lora_forward(x, w0, a),
            Adapter::Split(a) => split_forward(x, w0, a),
            Adapter::Hydra(a) => hydra_forward(x, w0, a).map(|(y, _)| y),
        }
    }

    /// Trainable tensors with their local names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            Adapter::Lora(a) => vec![("A".into(), &a.a), ("B".into(), &a.b)],
            Adapter::Split(s) => s
                .heads
                .iter()
                .enumerate()
                .flat_map(|(i, h)| [(format!("head{i}.A"), &h.a), (format!("head{i}.B"), &h.b)])
                .collect(),
            Adapter::Hydra(h) => {
                let mut out = vec![("A".to_string(), &h.a)];
                out.extend(
                    h.experts
                        .iter()
                        .enumerate()
                        .map(|(i, b)| (format!("B{i}"), b)),
                );
                out.push(("W_g".into(), &h.router));
                out
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            Adapter::Lora(a) => vec![("A".into(), &mut a.a), ("B".into(), &mut a.b)],
            Adapter::Split(s) => s
                .heads
                .iter_mut()
                .enumerate()
                .flat_map(|(i, h)| {
                    [
                        (format!("head{i}.A"), &mut h.a),
                        (format!("head{i}.B"), &mut h.b),
                    ]
                })
                .collect(),
            Adapter::Hydra(h) => {
                let mut out = vec![("A".to_string(), &mut h.a)];
                out.extend(
                    h.experts
                        .iter_mut()
                        .enumerate()
                        .map(|(i, b)| (format!("B{i}"), b)),
                );
                out.push(("W_g".into(), &mut h.router));
                out
            }
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Record `delta = (alpha / r) * adapter(X)` on the tape for row-token
    /// input `x (T x k)`, returning the `T x d` update and, for Hydra, the
    /// `T x N` gate matrix.
    ///
    /// `head_mask` (Split only) is a `T x n` constant: row `t` weights the
    /// heads for token `t`. `None` sums every head.
    pub fn record(
        &self,
        tape: &mut Tape,
        x: SlotId,
        prefix: &str,
        kind: LeafKind,
        head_mask: Option<&Matrix>,
    ) -> Result<(SlotId, Option<SlotId>)> {
        let leaf = |tape: &mut Tape, local: &str, m: &Matrix| {
            tape.leaf(kind, format!("{prefix}.{local}"), m.clone())
        };
        match self {
            Adapter::Lora(a) => {
                let al = leaf(tape, "A", &a.a);
                let bl = leaf(tape, "B", &a.b);
                Ok((record_pair(tape, x, al, bl, a.scale())?, None))
            }
            Adapter::Split(s) => {
                let mask = match head_mask {
                    Some(m) => {
                        if m.cols() != s.heads.len() || m.rows() != tape.value(x).rows() {
                            return Err(Error::shape(format!(
                                "head mask is {}x{}, expected {}x{}",
                                m.rows(),
                                m.cols(),
                                tape.value(x).rows(),
                                s.heads.len()
                            )));
                        }
                        Some(tape.input(m.clone()))
                    }
                    None => None,
                };
                let mut total: Option<SlotId> = None;
                for (i, h) in s.heads.iter().enumerate() {
                    let al = leaf(tape, &format!("head{i}.A"), &h.a);
                    let bl = leaf(tape, &format!("head{i}.B"), &h.b);
                    let mut d = record_pair(tape, x, al, bl, h.scale())?;
                    if let Some(mask) = mask {
                        d = tape.scale_rows_by_column(d, mask, i)?;
                    }
                    total = Some(match total {
                        None => d,
                        Some(t) => tape.add(t, d)?,
                    });
                }
                Ok((total.expect("at least one head"), None))
            }
            Adapter::Hydra(h) => {
                let al = leaf(tape, "A", &h.a);
                let at = tape.transpose(al)?;
                let z = tape.matmul(x, at)?;
                let wg = leaf(tape, "W_g", &h.router);
                let logits = tape.matmul(z, wg)?;
                let gates = tape.softmax_rows(logits)?;
                let mut total: Option<SlotId> = None;
                for (i, b) in h.experts.iter().enumerate() {
                    let bl = leaf(tape, &format!("B{i}"), b);
                    let bt = tape.transpose(bl)?;
                    let e = tape.matmul(z, bt)?;
                    let e = tape.scale_rows_by_column(e, gates, i)?;
                    total = Some(match total {
                        None => e,
                        Some(t) => tape.add(t, e)?,
                    });
                }
                let delta = tape.scale(total.expect("at least one expert"), h.scale())?;
                Ok((delta, Some(gates)))
            }
        }
    }

    /// Rebuild from named tensors as produced by [`Adapter::tensors`].
    pub fn from_tensors(
        scheme: Scheme,
        alpha: f64,
        mut get: impl FnMut(&str) -> Option<Matrix>,
    ) -> Result<Adapter> {
        fn need(get: &mut impl FnMut(&str) -> Option<Matrix>, name: &str) -> Result<Matrix> {
            get(name).ok_or_else(|| Error::usage(format!("missing adapter tensor {name:?}")))
        }
        match scheme {
            Scheme::Lora => Ok(Adapter::Lora(LoraAdapter::from_parts(
                need(&mut get, "A")?,
                need(&mut get, "B")?,
                alpha,
            )?)),
            Scheme::Split => {
                let mut heads = Vec::new();
                while let Some(a) = get(&format!("head{}.A", heads.len())) {
                    let b = need(&mut get, &format!("head{}.B", heads.len()))?;
                    heads.push(LoraAdapter::from_parts(a, b, alpha)?);
                }
                Ok(Adapter::Split(SplitAdapter::from_heads(heads)?))
            }
            Scheme::Hydra => {
                let a = need(&mut get, "A")?;
                let router = need(&mut get, "W_g")?;
                let mut experts = Vec::new();
                while let Some(b) = get(&format!("B{}", experts.len())) {
                    experts.push(b);
                }
                Ok(Adapter::Hydra(HydraAdapter::from_parts(
                    a, experts, router, alpha,
                )?))
            }
        }
    }
}

fn record_pair(tape: &mut Tape, x: SlotId, a: SlotId, b: SlotId, scale: f64) -> Result<SlotId> {
    let at = tape.transpose(a)?;
    let z = tape.matmul(x, at)?;
    let bt = tape.transpose(b)?;
    let d = tape.matmul(z, bt)?;
    tape.scale(d, scale)
}
