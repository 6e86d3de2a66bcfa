//! K-Means (Lloyd) and DBSCAN over dense feature points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::gemm_bt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    KMeans,
    Dbscan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub method: ClusterMethod,
    pub k: usize,
    pub eps: f64,
    pub min_samples: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            method: ClusterMethod::KMeans,
            k: 8,
            eps: 12.0,
            min_samples: 5,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl ClusterSpec {
    pub fn kmeans(k: usize, seed: u64) -> Self {
        ClusterSpec {
            k,
            seed,
            ..Default::default()
        }
    }

    pub fn dbscan(eps: f64, min_samples: usize) -> Self {
        ClusterSpec {
            method: ClusterMethod::Dbscan,
            eps,
            min_samples,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            ClusterMethod::KMeans if self.k == 0 => Err(Error::input("k-means needs k >= 1")),
            ClusterMethod::Dbscan if !(self.eps > 0.0) || self.min_samples == 0 => {
                Err(Error::input("dbscan needs eps > 0 and min_samples >= 1"))
            }
            _ => Ok(()),
        }
    }
}

/// Outcome of one clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    /// Cluster of each point; `None` marks DBSCAN noise.
    pub assignments: Vec<Option<usize>>,
    /// Sum of squared distances of clustered points to their centers.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Objective after each assignment step (k-means only).
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.len()];
        for c in self.assignments.iter().flatten() {
            sizes[*c] += 1;
        }
        sizes
    }

    pub fn noise_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_none()).count()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map_or(0, |p| p.len());
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::input("points have inconsistent dimensions"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::input("points contain non-finite values"));
    }
    Ok(dim)
}

/// Nearest center per point (lowest index on ties) and the squared distance to it.
fn assign(points: &[Vec<f64>], centers: &[Vec<f64>], dim: usize) -> Vec<(usize, f64)> {
    let (n, k) = (points.len(), centers.len());
    // |x|^2 + |c|^2 - 2 x.c via one GEMM, then exact distances for the winner
    let flat_p: Vec<f64> = points.iter().flatten().copied().collect();
    let flat_c: Vec<f64> = centers.iter().flatten().copied().collect();
    let mut cross = vec![0.0; n * k];
    gemm_bt(n, dim, k, &flat_p, &flat_c, 0.0, &mut cross);
    let cnorm: Vec<f64> = centers.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let row = &cross[i * k..(i + 1) * k];
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for j in 0..k {
                let v = cnorm[j] - 2.0 * row[j];
                if v < best_val {
                    best_val = v;
                    best = j;
                }
            }
            // resolve near-ties exactly so the lowest index wins
            let exact = squared_distance(p, &centers[best]);
            let slack = 1e-9 * (1.0 + exact);
            for j in 0..best {
                let v = cnorm[j] - 2.0 * row[j];
                if v <= best_val + slack {
                    let d = squared_distance(p, &centers[j]);
                    if d <= exact {
                        return (j, d);
                    }
                }
            }
            (best, exact)
        })
        .collect()
}

/// Lloyd's algorithm from `k` distinct starting points drawn uniformly by `spec.seed`.
///
/// Iterates until the largest center shift drops below `spec.tol` or `spec.max_iters`
/// rounds have run. A cluster that loses all its points is reseeded with the point
/// currently farthest from its own center. Assignments and inertia in the result refer
/// to the final centers.
pub fn kmeans_fit(points: &[Vec<f64>], spec: &ClusterSpec) -> Result<ClusterModel> {
    let k = spec.k;
    if k == 0 {
        return Err(Error::input("k-means needs k >= 1"));
    }
    if points.len() < k {
        return Err(Error::input(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let dim = check_points(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, points.len(), k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assignment = assign(points, &centers, dim);
    while iterations < spec.max_iters {
        iterations += 1;
        history.push(assignment.iter().map(|a| a.1).sum());

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&assignment) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut taken = vec![false; points.len()];
        let mut next = Vec::with_capacity(k);
        for (c, (sum, &count)) in sums.into_iter().zip(&counts).enumerate() {
            if count > 0 {
                next.push(sum.into_iter().map(|s| s / count as f64).collect::<Vec<_>>());
                continue;
            }
            let far = assignment
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(c % points.len());
            taken[far] = true;
            next.push(points[far].clone());
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        assignment = assign(points, &centers, dim);
        if shift < spec.tol {
            break;
        }
    }
    let inertia = assignment.iter().map(|a| a.1).sum();
    history.push(inertia);
    Ok(ClusterModel {
        centers,
        assignments: assignment.iter().map(|a| Some(a.0)).collect(),
        inertia,
        iterations_run: iterations,
        inertia_history: history,
    })
}

/// Best of `restarts` k-means runs seeded `spec.seed, spec.seed + 1, ...` (lowest inertia,
/// earliest run on ties).
pub fn kmeans_restarts(points: &[Vec<f64>], spec: &ClusterSpec, restarts: usize) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans_fit(
            points,
            &ClusterSpec {
                seed: spec.seed.wrapping_add(r as u64),
                ..spec.clone()
            },
        )?;
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Density clustering; noise gets `None` and is left out of the centers.
///
/// A point is core when at least `min_samples` points (itself included) lie within `eps`.
/// Cluster ids follow the order in which their first core point appears.
pub fn dbscan_fit(points: &[Vec<f64>], spec: &ClusterSpec) -> Result<ClusterModel> {
    if !(spec.eps > 0.0) || spec.min_samples == 0 {
        return Err(Error::input("dbscan needs eps > 0 and min_samples >= 1"));
    }
    let dim = check_points(points)?;
    let n = points.len();
    let eps2 = spec.eps * spec.eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| squared_distance(&points[i], &points[j]) <= eps2)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= spec.min_samples).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut clusters = 0;
    for start in 0..n {
        if !is_core[start] || labels[start].is_some() {
            continue;
        }
        let id = clusters;
        clusters += 1;
        labels[start] = Some(id);
        let mut queue = vec![start];
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(id);
                    if is_core[q] {
                        queue.push(q);
                    }
                }
            }
        }
    }

    let mut centers = vec![vec![0.0; dim]; clusters];
    let mut counts = vec![0usize; clusters];
    for (p, l) in points.iter().zip(&labels) {
        if let Some(c) = *l {
            counts[c] += 1;
            centers[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
    }
    for (c, &count) in centers.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= count as f64);
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .filter_map(|(p, l)| l.map(|c| squared_distance(p, &centers[c])))
        .sum();
    Ok(ClusterModel {
        centers,
        assignments: labels,
        inertia,
        iterations_run: 1,
        inertia_history: Vec::new(),
    })
}

pub fn fit(points: &[Vec<f64>], spec: &ClusterSpec) -> Result<ClusterModel> {
    match spec.method {
        ClusterMethod::KMeans => kmeans_fit(points, spec),
        ClusterMethod::Dbscan => dbscan_fit(points, spec),
    }
}

/// Mean of the given centers, optionally rescaled to unit length.
pub fn positive_mean(centers: &[Vec<f64>], renormalize: bool) -> Result<Vec<f64>> {
    let first = centers
        .first()
        .ok_or_else(|| Error::input("no positive cluster centers"))?;
    let mut mean = vec![0.0; first.len()];
    for c in centers {
        if c.len() != mean.len() {
            return Err(Error::input("centers have inconsistent dimensions"));
        }
        mean.iter_mut().zip(c).for_each(|(m, v)| *m += v);
    }
    let m = centers.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    if renormalize {
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            mean.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(mean)
}

/// JSON summary written by the `cluster` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub method: ClusterMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_samples: Option<usize>,
    pub points: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub sizes: Vec<usize>,
    pub noise: usize,
}

impl ClusterReport {
    pub fn new(spec: &ClusterSpec, model: &ClusterModel) -> Self {
        let kmeans = spec.method == ClusterMethod::KMeans;
        ClusterReport {
            method: spec.method,
            k: kmeans.then_some(spec.k),
            eps: (!kmeans).then_some(spec.eps),
            min_samples: (!kmeans).then_some(spec.min_samples),
            points: model.assignments.len(),
            inertia: model.inertia,
            iterations: model.iterations_run,
            sizes: model.sizes(),
            noise: model.noise_count(),
        }
    }
}
