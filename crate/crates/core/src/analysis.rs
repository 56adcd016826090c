//! Post-hoc adapter analysis: distances between trained A and B factors,
//! a 2-D PCA embedding of them, and per-token cost accounting.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, Scheme};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, dot, Matrix};
use crate::params::per_matrix;

/// Power iteration stops once successive unit vectors differ by less than this.
pub const PCA_TOLERANCE: f64 = 1e-9;
const PCA_MAX_ITER: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::A => "A",
            Role::B => "B",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmoduleLabel {
    /// Checkpoint id.
    pub adapter: String,
    pub role: Role,
    pub layer: usize,
    pub projection: String,
    /// Tensor name within the adapter, e.g. `B2` or `head0.A`.
    pub tensor: String,
}

impl SubmoduleLabel {
    pub fn id(&self) -> String {
        format!(
            "{}:layer{}.{}.{}",
            self.adapter, self.layer, self.projection, self.tensor
        )
    }
}

/// Why the separation ratio is not a plain quotient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioFlag {
    /// Both distances are zero; the ratio is reported as 1.
    BothZero,
    /// Only the A distance is zero; the ratio is infinite.
    AZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub d_a: f64,
    pub d_b: f64,
    pub ratio: f64,
    pub flag: Option<RatioFlag>,
}

impl Separation {
    pub fn new(d_a: f64, d_b: f64) -> Separation {
        let (ratio, flag) = match (d_a == 0.0, d_b == 0.0) {
            (true, true) => (1.0, Some(RatioFlag::BothZero)),
            (true, false) => (f64::INFINITY, Some(RatioFlag::AZero)),
            _ => (d_b / d_a, None),
        };
        Separation {
            d_a,
            d_b,
            ratio,
            flag,
        }
    }
}

/// Mean pairwise Frobenius distance divided by the mean Frobenius norm.
/// Zero when all matrices are zero.
pub fn normalized_spread(ms: &[&Matrix]) -> Result<f64> {
    if ms.len() < 2 {
        return Err(Error::usage("spread needs at least two matrices"));
    }
    let scale = compensated_sum(ms.iter().map(|m| m.frobenius_norm())) / ms.len() as f64;
    let mut dists = Vec::new();
    for i in 0..ms.len() {
        for j in i + 1..ms.len() {
            dists.push(crate::linalg::frobenius_distance(ms[i], ms[j])?);
        }
    }
    let mean = compensated_sum(dists.iter().copied()) / dists.len() as f64;
    Ok(if scale > 0.0 { mean / scale } else { 0.0 })
}

/// Separation of the A factors against the B factors of same-shaped adapters.
pub fn separation(a: &[&Matrix], b: &[&Matrix]) -> Result<Separation> {
    Ok(Separation::new(
        normalized_spread(a)?,
        normalized_spread(b)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub labels: Vec<SubmoduleLabel>,
    /// Symmetric, zero diagonal, on role-normalized vectors.
    pub distances: Matrix,
    pub coords: Vec<[f64; 2]>,
    pub separation: Separation,
}

fn parse_point(point: &str) -> (usize, String) {
    point
        .strip_prefix("layer")
        .and_then(|rest| rest.split_once('.'))
        .and_then(|(l, p)| l.parse().ok().map(|l| (l, p.to_string())))
        .unwrap_or((0, point.to_string()))
}

fn role_of(adapter: &Adapter, tensor: &str) -> Option<Role> {
    match (adapter, tensor) {
        (_, "W_g") => None,
        (_, t) if t == "A" || t.ends_with(".A") => Some(Role::A),
        _ => Some(Role::B),
    }
}

/// Distances and a PCA embedding of every A and B factor in the checkpoints.
///
/// A factors are flattened as stored (`r x k`), B factors transposed
/// (`r x d`), so both read rank-major; shorter vectors are zero-padded. Each
/// vector is divided by the mean Frobenius norm of its role before
/// distances are taken. Routers are not included.
/// Point, tensor name and shape of every adapter tensor in a checkpoint.
type Layout = Vec<(String, String, (usize, usize))>;

pub fn breakdown(checkpoints: &[(String, Checkpoint)]) -> Result<EmbeddingReport> {
    if checkpoints.len() < 2 {
        return Err(Error::usage("breakdown needs at least two checkpoints"));
    }
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    let mut reference: Option<Layout> = None;
    for (id, ck) in checkpoints {
        let mut layout = Vec::new();
        for (point, adapter) in ck.adapters()? {
            let (layer, projection) = parse_point(&point);
            for (tensor, m) in adapter.tensors() {
                layout.push((point.clone(), tensor.clone(), m.shape()));
                let Some(role) = role_of(&adapter, &tensor) else {
                    continue;
                };
                let flat = match role {
                    Role::A => m.data().to_vec(),
                    Role::B => m.transpose().into_data(),
                };
                labels.push(SubmoduleLabel {
                    adapter: id.clone(),
                    role,
                    layer,
                    projection: projection.clone(),
                    tensor,
                });
                vectors.push(flat);
            }
        }
        if layout.is_empty() {
            return Err(Error::usage(format!("checkpoint {id:?} holds no adapters")));
        }
        match &reference {
            None => reference = Some(layout),
            Some(r) if *r != layout => {
                return Err(Error::usage(format!(
                    "checkpoint {id:?} has different adapter shapes"
                )));
            }
            _ => {}
        }
    }

    let width = vectors.iter().map(Vec::len).max().unwrap_or(0);
    for v in &mut vectors {
        v.resize(width, 0.0);
    }
    let mut role_scale = BTreeMap::new();
    for role in [Role::A, Role::B] {
        let norms: Vec<f64> = labels
            .iter()
            .zip(&vectors)
            .filter(|(l, _)| l.role == role)
            .map(|(_, v)| dot(v, v).sqrt())
            .collect();
        let mean = if norms.is_empty() {
            0.0
        } else {
            compensated_sum(norms.iter().copied()) / norms.len() as f64
        };
        role_scale.insert(role, if mean > 0.0 { mean } else { 1.0 });
    }
    for (l, v) in labels.iter().zip(vectors.iter_mut()) {
        let s = role_scale[&l.role];
        v.iter_mut().for_each(|x| *x /= s);
    }

    let n = vectors.len();
    let mut distances = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = crate::linalg::squared_distance(&vectors[i], &vectors[j]).sqrt();
            distances.set(i, j, d);
            distances.set(j, i, d);
        }
    }

    // D_A, D_B: mean distance between the same tensor of different checkpoints
    let mut sums: BTreeMap<Role, Vec<f64>> = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&labels[i], &labels[j]);
            if a.adapter != b.adapter
                && a.role == b.role
                && (a.layer, &a.projection, &a.tensor) == (b.layer, &b.projection, &b.tensor)
            {
                sums.entry(a.role).or_default().push(distances.get(i, j));
            }
        }
    }
    let mean = |r: Role| {
        sums.get(&r)
            .map_or(0.0, |v| compensated_sum(v.iter().copied()) / v.len() as f64)
    };
    let separation = Separation::new(mean(Role::A), mean(Role::B));

    Ok(EmbeddingReport {
        labels,
        distances,
        coords: pca_2d(&vectors)?,
        separation,
    })
}

/// Project rows onto the top two principal components, found by power
/// iteration with deflation on the covariance. Component signs are fixed
/// so the largest-magnitude loading is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let p = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::usage("PCA needs at least one row"))?;
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::shape("PCA rows have different lengths"));
    }
    let mean: Vec<f64> = (0..p)
        .map(|j| compensated_sum(rows.iter().map(|r| r[j])) / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let cov_apply = |v: &[f64], found: &[Vec<f64>], lambdas: &[f64]| -> Vec<f64> {
        let proj: Vec<f64> = centered.iter().map(|r| dot(r, v)).collect();
        let mut out: Vec<f64> = (0..p)
            .map(|j| compensated_sum(centered.iter().zip(&proj).map(|(r, s)| r[j] * s)) / n as f64)
            .collect();
        for (u, l) in found.iter().zip(lambdas) {
            let c = l * dot(u, v);
            out.iter_mut().zip(u).for_each(|(o, ui)| *o -= c * ui);
        }
        out
    };

    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut lambdas = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..p)
            .map(|j| 1.0 + (j as f64 + 1.0).sqrt().fract())
            .collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITER {
            let mut w = cov_apply(&v, &components, &lambdas);
            lambda = dot(&w, &w).sqrt();
            if lambda <= 1e-300 {
                break;
            }
            normalize(&mut w);
            // keep a consistent orientation between iterations
            if dot(&w, &v) < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            let delta = crate::linalg::squared_distance(&w, &v).sqrt();
            v = w;
            if delta < PCA_TOLERANCE {
                break;
            }
        }
        if lambda <= 1e-300 {
            v = vec![0.0; p];
            lambda = 0.0;
        } else {
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        components.push(v);
        lambdas.push(lambda);
    }
    Ok(centered
        .iter()
        .map(|r| [dot(r, &components[0]), dot(r, &components[1])])
        .collect())
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn write_distance_csv(report: &EmbeddingReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id_a", "id_b", "dist"]).map_err(csv_err)?;
    for (i, a) in report.labels.iter().enumerate() {
        for (j, b) in report.labels.iter().enumerate() {
            w.write_record([a.id(), b.id(), report.distances.get(i, j).to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_embedding_csv(report: &EmbeddingReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "role", "layer", "x", "y"])
        .map_err(csv_err)?;
    for (l, c) in report.labels.iter().zip(&report.coords) {
        w.write_record([
            l.id(),
            l.role.as_str().to_string(),
            l.layer.to_string(),
            c[0].to_string(),
            c[1].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Scatter plot of the embedding, A factors as circles and B as squares.
pub fn embedding_svg(report: &EmbeddingReport) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    let xs = report.coords.iter().map(|c| c[0]);
    let ys = report.coords.iter().map(|c| c[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| {
        (lo.min(y), hi.max(y))
    });
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-12) * (SIZE - 2.0 * PAD);
    let sy = |y: f64| SIZE - PAD - (y - y0) / (y1 - y0).max(1e-12) * (SIZE - 2.0 * PAD);
    let adapters: Vec<&str> = {
        let mut v: Vec<&str> = report.labels.iter().map(|l| l.adapter.as_str()).collect();
        v.dedup();
        v
    };
    const PALETTE: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let mut svg =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\">\n");
    for (l, c) in report.labels.iter().zip(&report.coords) {
        let color =
            PALETTE[adapters.iter().position(|a| *a == l.adapter).unwrap_or(0) % PALETTE.len()];
        let (x, y) = (sx(c[0]), sy(c[1]));
        let shape = match l.role {
            Role::A => format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{color}\">"),
            Role::B => format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"9\" height=\"9\" fill=\"{color}\">",
                x - 4.5,
                y - 4.5
            ),
        };
        let close = if l.role == Role::A {
            "</circle>"
        } else {
            "</rect>"
        };
        svg.push_str(&format!("  {shape}<title>{}</title>{close}\n", l.id()));
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub scheme: Scheme,
    pub rank: u64,
    /// Heads (Split) or experts (Hydra); ignored for LoRA.
    pub count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDims {
    pub d: u64,
    pub k: u64,
    /// Adapted matrices in the whole model.
    pub matrices: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub scheme: Scheme,
    pub params: u64,
    /// Adapter-branch multiply-accumulates per token.
    pub macs_fwd: u64,
    pub macs_bwd: u64,
    /// `params / reference params`.
    pub ratio: f64,
}

/// Parameters and per-token MACs of an adapter configuration, relative to
/// `reference`. Every adapter weight takes part in exactly one
/// multiply-accumulate per token, so forward MACs equal the parameter count.
pub fn cost(spec: &CostSpec, dims: &CostDims, reference: &CostSpec) -> Result<CostReport> {
    let count = |s: &CostSpec| -> Result<u64> {
        if s.rank == 0
            || dims.d == 0
            || dims.k == 0
            || dims.matrices == 0
            || (s.scheme != Scheme::Lora && s.count == 0)
        {
            return Err(Error::usage(
                "cost dimensions and counts must be at least 1",
            ));
        }
        Ok(per_matrix(s.scheme, dims.d, dims.k, s.rank, s.count.max(1)) * dims.matrices)
    };
    let params = count(spec)?;
    let reference = count(reference)?;
    Ok(CostReport {
        scheme: spec.scheme,
        params,
        macs_fwd: params,
        macs_bwd: 2 * params,
        ratio: params as f64 / reference as f64,
    })
}

pub fn write_cost_csv(rows: &[CostReport], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "params", "macs_fwd", "ratio"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scheme.as_str().to_string(),
            r.params.to_string(),
            r.macs_fwd.to_string(),
            r.ratio.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
