//! k-means over feature vectors and elbow selection of the cluster count.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TfIdfModel};
use crate::error::{Error, Result};
use crate::linalg::{squared_distance, SeededRng};

pub const DEFAULT_RESTARTS: usize = 8;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Allowed per-iteration SSE increase from rounding.
pub const SSE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
    /// SSE after every assignment step, one trace per restart.
    pub sse_histories: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SseCurve {
    /// `(k, sse)` for `k = 1..=k_max`.
    pub points: Vec<(usize, f64)>,
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    let dim = vectors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::usage("no vectors to cluster"))?;
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("vectors have different dimensions"));
    }
    Ok(dim)
}

pub fn distinct_count(vectors: &[Vec<f64>]) -> usize {
    vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<BTreeSet<_>>()
        .len()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(vectors: &[Vec<f64>], centers: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (a, v) in out.iter_mut().zip(vectors) {
        let (j, d) = nearest(v, centers);
        *a = j;
        sse += d;
    }
    sse
}

fn kmeans_pp(vectors: &[Vec<f64>], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut centers = vec![vectors[rng.below(vectors.len())].clone()];
    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| squared_distance(v, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(vectors.len())
        };
        let c = vectors[pick].clone();
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(squared_distance(v, &c));
        }
        centers.push(c);
    }
    centers
}

struct Run {
    centers: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    sse: f64,
    iterations: usize,
    history: Vec<f64>,
}

/// Lloyd iterations from the given centers until assignments stop changing.
fn lloyd(vectors: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> Run {
    let k = centers.len();
    let dim = vectors[0].len();
    let mut assignments = vec![0; vectors.len()];
    let mut sse = assign(vectors, &centers, &mut assignments);
    let mut history = vec![sse];
    let mut iterations = 0;
    let mut next = assignments.clone();

    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut taken = BTreeSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // reseed at the point farthest from its own center
                let far = (0..vectors.len())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        let da = squared_distance(&vectors[a], &centers[assignments[a]]);
                        let db = squared_distance(&vectors[b], &centers[assignments[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("k <= number of points");
                taken.insert(far);
                centers[j] = vectors[far].clone();
            }
        }
        sse = assign(vectors, &centers, &mut next);
        history.push(sse);
        let stable = next == assignments;
        std::mem::swap(&mut assignments, &mut next);
        if stable {
            break;
        }
    }
    Run {
        centers,
        assignments,
        sse,
        iterations,
        history,
    }
}

/// Best-of-`restarts` k-means with k-means++ seeding. Restart `i` draws
/// from `SeededRng::new(seed).derive(i)`; ties keep the lowest restart.
pub fn kmeans(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<KMeansResult> {
    kmeans_with_warm_start(vectors, k, seed, max_iter, restarts, None)
}

fn kmeans_with_warm_start(
    vectors: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
    warm: Option<Vec<Vec<f64>>>,
) -> Result<KMeansResult> {
    check_vectors(vectors)?;
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    let distinct = distinct_count(vectors);
    if k > distinct {
        return Err(Error::usage(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let base = SeededRng::new(seed);
    let mut runs = Vec::new();
    for r in 0..restarts.max(1) {
        let mut rng = base.derive(r as u64);
        runs.push(lloyd(vectors, kmeans_pp(vectors, k, &mut rng), max_iter));
    }
    if let Some(centers) = warm {
        runs.push(lloyd(vectors, centers, max_iter));
    }
    let histories = runs.iter().map(|r| r.history.clone()).collect();
    let best = runs
        .into_iter()
        .reduce(|best, r| if r.sse < best.sse { r } else { best })
        .expect("at least one run");
    Ok(KMeansResult {
        k,
        centers: best.centers,
        assignments: best.assignments,
        sse: best.sse,
        iterations: best.iterations,
        sse_histories: histories,
    })
}

/// SSE of the best clustering for every `k` in `1..=k_max`.
///
/// Each `k > 1` also runs one warm start from the previous centers plus the
/// point farthest from them, which makes the curve non-increasing. Values
/// of `k` beyond the number of distinct points have SSE exactly 0.
pub fn sse_curve(vectors: &[Vec<f64>], k_max: usize, seed: u64) -> Result<SseCurve> {
    check_vectors(vectors)?;
    if k_max < 2 {
        return Err(Error::usage("k_max must be at least 2"));
    }
    let distinct = distinct_count(vectors);
    let mut points = Vec::with_capacity(k_max);
    let mut prev: Option<Vec<Vec<f64>>> = None;
    for k in 1..=k_max {
        if k > distinct {
            points.push((k, 0.0));
            continue;
        }
        let warm = prev.take().map(|mut centers| {
            let far = vectors
                .iter()
                .max_by(|a, b| nearest(a, &centers).1.total_cmp(&nearest(b, &centers).1))
                .expect("non-empty");
            centers.push(far.clone());
            centers
        });
        let res = kmeans_with_warm_start(
            vectors,
            k,
            seed.wrapping_add(k as u64),
            DEFAULT_MAX_ITER,
            DEFAULT_RESTARTS,
            warm,
        )?;
        points.push((k, res.sse));
        prev = Some(res.centers);
    }
    Ok(SseCurve { points })
}

/// Knee of the SSE curve: the `k` whose min-max normalized SSE lies
/// farthest below the chord joining the first and last points. Ties go to
/// the smaller `k`; a curve with no point below the chord yields its first `k`.
pub fn elbow_select(curve: &SseCurve) -> Result<usize> {
    let pts = &curve.points;
    if pts.len() < 3 {
        return Err(Error::usage("elbow selection needs at least 3 points"));
    }
    let (k0, kn) = (pts[0].0 as f64, pts[pts.len() - 1].0 as f64);
    let max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if max - min <= 0.0 || kn <= k0 {
        return Ok(pts[0].0);
    }
    let norm = |p: &(usize, f64)| ((p.0 as f64 - k0) / (kn - k0), (p.1 - min) / (max - min));
    let (_, y_first) = norm(&pts[0]);
    let (_, y_last) = norm(&pts[pts.len() - 1]);
    let mut best = (pts[0].0, 0.0);
    for p in pts {
        let (x, y) = norm(p);
        let chord = y_first + (y_last - y_first) * x;
        let gap = chord - y;
        if gap > best.1 + 1e-12 {
            best = (p.0, gap);
        }
    }
    Ok(best.0)
}

/// Output of the corpus clustering pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k_selected: usize,
    pub sse_curve: Vec<(usize, f64)>,
    pub assignments: BTreeMap<String, usize>,
}

/// Pick the expert count for a corpus: the elbow of the TF-IDF k-means SSE
/// curve, or `override_k` when given. Assignments are diagnostic only.
pub fn init_hydra_from_corpus(
    corpus: &Corpus,
    k_max: usize,
    seed: u64,
    override_k: Option<usize>,
) -> Result<ClusterReport> {
    if corpus.is_empty() {
        return Err(Error::usage("corpus is empty"));
    }
    if override_k == Some(0) {
        return Err(Error::usage("expert count override must be at least 1"));
    }
    let tfidf = TfIdfModel::fit(corpus)?;
    let vectors = tfidf.transform_corpus(corpus);
    let distinct = distinct_count(&vectors);

    let curve = if distinct > 1 && k_max >= 2 {
        Some(sse_curve(&vectors, k_max, seed)?)
    } else {
        None
    };
    let k_selected = match (override_k, &curve) {
        (Some(k), _) => k,
        (None, _) if distinct == 1 => 1,
        (None, Some(c)) => elbow_select(c)?,
        (None, None) => return Err(Error::usage("k_max must be at least 3 for elbow selection")),
    };

    let k_assign = k_selected.min(distinct);
    let result = kmeans(&vectors, k_assign, seed, DEFAULT_MAX_ITER, DEFAULT_RESTARTS)?;
    let assignments = corpus
        .documents()
        .iter()
        .zip(&result.assignments)
        .map(|(d, &a)| (d.id.clone(), a))
        .collect();
    let sse_curve = curve.map(|c| c.points).unwrap_or_else(|| vec![(1, 0.0)]);
    Ok(ClusterReport {
        k_selected,
        sse_curve,
        assignments,
    })
}

/// Fraction of points whose cluster matches the planted label under the
/// best one-to-one relabeling (exhaustive over permutations, `k <= 8`).
pub fn best_permutation_agreement(assignments: &[usize], labels: &[usize], k: usize) -> f64 {
    assert!(k <= 8, "exhaustive matching is limited to k <= 8");
    let mut confusion = vec![vec![0usize; k]; k];
    for (&a, &l) in assignments.iter().zip(labels) {
        if a < k && l < k {
            confusion[a][l] += 1;
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hits: usize = p.iter().enumerate().map(|(a, &l)| confusion[a][l]).sum();
        best = best.max(hits);
    });
    best as f64 / assignments.len() as f64
}

fn permute(items: &mut [usize], i: usize, visit: &mut impl FnMut(&[usize])) {
    if i == items.len() {
        visit(items);
        return;
    }
    for j in i..items.len() {
        items.swap(i, j);
        permute(items, i + 1, visit);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Document, SynthSpec};
    use proptest::prelude::*;

    fn planted_vectors(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let s = synth_corpus(&SynthSpec::new(3, 50, 0.8, seed)).unwrap();
        let m = TfIdfModel::fit(&s.corpus).unwrap();
        (m.transform_corpus(&s.corpus), s.labels)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let v = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let r = kmeans(&v, 1, 0, 100, 3).unwrap();
        assert_eq!(r.centers[0], vec![2.0, 1.0]);
        // squared deviations: (4+0) + (0+4) + (4+4)
        assert!((r.sse - 16.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_separate_exactly() {
        let v = vec![vec![0.0], vec![10.0]];
        let r = kmeans(&v, 2, 5, 100, 4).unwrap();
        let mut c: Vec<f64> = r.centers.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn k_above_distinct_points_is_usage_error() {
        let v = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert!(matches!(kmeans(&v, 3, 0, 10, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn recovers_planted_components() {
        let (v, labels) = planted_vectors(3);
        let r = kmeans(&v, 3, 1, DEFAULT_MAX_ITER, DEFAULT_RESTARTS).unwrap();
        assert!(best_permutation_agreement(&r.assignments, &labels, 3) >= 0.95);
        for (p, &a) in v.iter().zip(&r.assignments) {
            let d = squared_distance(p, &r.centers[a]);
            assert!(r.centers.iter().all(|c| d <= squared_distance(p, c)));
        }
        for h in &r.sse_histories {
            assert!(h.windows(2).all(|w| w[1] <= w[0] + SSE_SLACK));
        }
    }

    #[test]
    fn duplicate_points_have_zero_curve() {
        let v = vec![vec![0.5, 0.5]; 6];
        let c = sse_curve(&v, 4, 0).unwrap();
        assert_eq!(c.points, vec![(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)]);
    }

    #[test]
    fn elbow_by_hand() {
        let curve = SseCurve {
            points: vec![
                (1, 100.0),
                (2, 40.0),
                (3, 12.0),
                (4, 10.0),
                (5, 9.0),
                (6, 8.5),
            ],
        };
        assert_eq!(elbow_select(&curve).unwrap(), 3);
        let linear = SseCurve {
            points: (1..=6).map(|k| (k, 60.0 - 10.0 * k as f64)).collect(),
        };
        assert_eq!(elbow_select(&linear).unwrap(), 1);
        let flat = SseCurve {
            points: (1..=4).map(|k| (k, 2.0)).collect(),
        };
        assert_eq!(elbow_select(&flat).unwrap(), 1);
        assert!(elbow_select(&SseCurve {
            points: vec![(1, 2.0), (2, 1.0)]
        })
        .is_err());
    }

    #[test]
    fn planted_curve_drops_through_three() {
        let (v, _) = planted_vectors(4);
        let c = sse_curve(&v, 8, 4).unwrap();
        let s: Vec<f64> = c.points.iter().map(|p| p.1).collect();
        assert!(s.windows(2).all(|w| w[1] <= w[0] + SSE_SLACK));
        assert!(s[0] - s[2] > 3.0 * (s[2] - s[7]), "{s:?}");
        assert_eq!(elbow_select(&c).unwrap(), 3);
    }

    #[test]
    fn pipeline_override_and_degenerate_cases() {
        let s = synth_corpus(&SynthSpec::new(3, 30, 0.8, 9)).unwrap();
        assert_eq!(
            init_hydra_from_corpus(&s.corpus, 8, 1, Some(4))
                .unwrap()
                .k_selected,
            4
        );
        let r = init_hydra_from_corpus(&s.corpus, 8, 1, None).unwrap();
        assert_eq!(r.k_selected, 3);
        assert_eq!(r.assignments.len(), 90);
        let one = Corpus::new(vec![Document::new("only", "a lone document")]).unwrap();
        assert_eq!(
            init_hydra_from_corpus(&one, 8, 1, None).unwrap().k_selected,
            1
        );
    }

    proptest! {
        #[test]
        fn elbow_is_scale_invariant(drops in proptest::collection::vec(0.0f64..50.0, 3..9), scale in 0.001f64..1000.0) {
            let mut sse = 500.0;
            let points: Vec<(usize, f64)> = drops.iter().enumerate().map(|(i, d)| { sse -= d; (i + 1, sse) }).collect();
            let scaled = points.iter().map(|&(k, s)| (k, s * scale)).collect();
            prop_assert_eq!(elbow_select(&SseCurve { points }).unwrap(), elbow_select(&SseCurve { points: scaled }).unwrap());
        }

        #[test]
        fn curve_is_monotone(seed in any::<u64>(), n in 4usize..30) {
            let mut rng = SeededRng::new(seed);
            let v: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let c = sse_curve(&v, 4.min(n), seed).unwrap();
            prop_assert!(c.points.windows(2).all(|w| w[1].1 <= w[0].1 + SSE_SLACK));
        }
    }
}
