use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netcore::gemm_bt;
use crate::roipool::{FeatureRole, FeatureVector};

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddedPoint {
    pub role: FeatureRole,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub points: Vec<EmbeddedPoint>,
    /// Variance captured by each axis (population covariance eigenvalues).
    pub variances: [f64; 2],
    /// Every input was identical; all points sit at the origin.
    pub rank_zero: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * n..(i + 1) * n], v);
    }
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration.
fn power_iteration(m: &[f64], n: usize, start: &[f64]) -> (f64, Vec<f64>) {
    let norm = dot(start, start).sqrt();
    let mut v: Vec<f64> = start.iter().map(|x| x / norm).collect();
    let mut next = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        mat_vec(m, n, &v, &mut next);
        let len = dot(&next, &next).sqrt();
        if len == 0.0 {
            return (0.0, v);
        }
        next.iter_mut().for_each(|x| *x /= len);
        let delta = v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        lambda = len;
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOL {
            break;
        }
    }
    (lambda, v)
}

/// Makes the largest-magnitude coordinate positive (first index on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top two principal directions of the rows of `x` (`n x d`, already centered).
fn top_two_directions(x: &[f64], n: usize, d: usize) -> ([f64; 2], [Vec<f64>; 2]) {
    // eigen-solve whichever of X^T X (d x d) and X X^T (n x n) is smaller
    let use_gram = n < d;
    let m = if use_gram { n } else { d };
    let mut mat = vec![0.0; m * m];
    if use_gram {
        gemm_bt(n, d, n, x, x, 0.0, &mut mat);
    } else {
        let mut xt = vec![0.0; d * n];
        for i in 0..n {
            for j in 0..d {
                xt[j * n + i] = x[i * d + j];
            }
        }
        gemm_bt(d, n, d, &xt, &xt, 0.0, &mut mat);
    }
    mat.iter_mut().for_each(|v| *v /= n as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut values = [0.0; 2];
    let mut dirs = [vec![0.0; d], vec![0.0; d]];
    let trace: f64 = (0..m).map(|i| mat[i * m + i]).sum();
    for k in 0..2 {
        let start: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (lambda, u) = power_iteration(&mat, m, &start);
        if !(lambda > 1e-12 * trace.max(f64::MIN_POSITIVE)) {
            break;
        }
        values[k] = lambda;
        let mut v = if use_gram {
            // v = X^T u / sqrt(n * lambda)
            let scale = 1.0 / (n as f64 * lambda).sqrt();
            (0..d)
                .map(|j| (0..n).map(|i| x[i * d + j] * u[i]).sum::<f64>() * scale)
                .collect()
        } else {
            u.clone()
        };
        fix_sign(&mut v);
        // deflate
        for i in 0..m {
            for j in 0..m {
                mat[i * m + j] -= lambda * u[i] * u[j];
            }
        }
        dirs[k] = v;
    }
    (values, dirs)
}

/// Mean-centered projection onto the two leading principal directions.
pub fn embed_2d(features: &[(FeatureRole, FeatureVector)]) -> Result<Embedding> {
    if features.len() < 2 {
        return Err(Error::input("embedding needs at least two features"));
    }
    let d = features[0].1.dim();
    if features.iter().any(|f| f.1.dim() != d) {
        return Err(Error::input("features have inconsistent dimensions"));
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for (_, f) in features {
        mean.iter_mut().zip(&f.values).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut x = Vec::with_capacity(n * d);
    for (_, f) in features {
        x.extend(f.values.iter().zip(&mean).map(|(v, m)| v - m));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite feature values"));
    }
    let (variances, dirs) = top_two_directions(&x, n, d);
    let rank_zero = variances[0] == 0.0;
    let points = features
        .iter()
        .enumerate()
        .map(|(i, (role, _))| {
            let row = &x[i * d..(i + 1) * d];
            EmbeddedPoint {
                role: *role,
                x: dot(row, &dirs[0]),
                y: dot(row, &dirs[1]),
            }
        })
        .collect();
    Ok(Embedding {
        points,
        variances,
        rank_zero,
    })
}

pub fn write_embedding_csv<W: Write>(mut out: W, points: &[EmbeddedPoint]) -> std::io::Result<()> {
    writeln!(out, "role,x,y")?;
    for p in points {
        writeln!(out, "{},{},{}", p.role, p.x, p.y)?;
    }
    Ok(())
}

pub fn save_embedding_csv(path: &Path, points: &[EmbeddedPoint]) -> Result<()> {
    let mut buf = Vec::new();
    write_embedding_csv(&mut buf, points).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
