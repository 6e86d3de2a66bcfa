//! Cluster-contrastive loss, detection losses and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(Error::input(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Which logits sit in the softmax denominator of the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// Positive term plus every negative center (InfoNCE).
    #[default]
    WithPositive,
    /// Negative centers only.
    NegativesOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusLoss {
    /// Mean of the per-sample losses.
    pub loss: f64,
    /// Gradient of `loss` with respect to each sample.
    pub grads: Vec<Vec<f64>>,
    pub skipped: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logits `[positive, negatives...]` of one sample.
fn logits(p: &[f64], pos_mean: &[f64], neg_centers: &[Vec<f64>], tau: f64) -> Vec<f64> {
    std::iter::once(dot(p, pos_mean) / tau)
        .chain(neg_centers.iter().map(|c| dot(p, c) / tau))
        .collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax weights over `[positive, negatives...]` for one sample. Under
/// [`DenominatorMode::NegativesOnly`] the positive slot is zero.
pub fn clus_softmax(
    p: &[f64],
    pos_mean: &[f64],
    neg_centers: &[Vec<f64>],
    tau: Temperature,
    mode: DenominatorMode,
) -> Vec<f64> {
    let z = logits(p, pos_mean, neg_centers, tau.get());
    let start = match mode {
        DenominatorMode::WithPositive => 0,
        DenominatorMode::NegativesOnly => 1,
    };
    let lse = log_sum_exp(&z[start..]);
    z.iter()
        .enumerate()
        .map(|(i, v)| if i < start { 0.0 } else { (v - lse).exp() })
        .collect()
}

/// Per-sample contrastive loss `-log(exp(p.c_mean/tau) / denominator)`.
pub fn clus_loss_single(
    p: &[f64],
    pos_mean: &[f64],
    neg_centers: &[Vec<f64>],
    tau: Temperature,
    mode: DenominatorMode,
) -> f64 {
    let z = logits(p, pos_mean, neg_centers, tau.get());
    // work with offsets from the positive logit so a dominant positive stays exact
    let d: Vec<f64> = z[1..].iter().map(|v| v - z[0]).collect();
    match mode {
        DenominatorMode::WithPositive => {
            let m = d.iter().copied().fold(0.0, f64::max);
            if m == 0.0 {
                d.iter().map(|v| v.exp()).sum::<f64>().ln_1p()
            } else {
                m + ((-m).exp() + d.iter().map(|v| (v - m).exp()).sum::<f64>()).ln()
            }
        }
        DenominatorMode::NegativesOnly => log_sum_exp(&d),
    }
}

/// Contrastive loss averaged over `samples`, with centers treated as constants.
///
/// Returns a skipped, zero loss when there are no samples or no negative centers.
pub fn clus_loss(
    samples: &[Vec<f64>],
    pos_mean: &[f64],
    neg_centers: &[Vec<f64>],
    tau: Temperature,
    mode: DenominatorMode,
) -> Result<ClusLoss> {
    if samples.is_empty() || neg_centers.is_empty() {
        return Ok(ClusLoss {
            loss: 0.0,
            grads: vec![vec![0.0; pos_mean.len()]; samples.len()],
            skipped: true,
        });
    }
    let dim = pos_mean.len();
    if samples.iter().chain(neg_centers).any(|v| v.len() != dim) {
        return Err(Error::input("contrastive loss inputs have inconsistent dimensions"));
    }
    let t = tau.get();
    let scale = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(samples.len());
    for p in samples {
        total += clus_loss_single(p, pos_mean, neg_centers, tau, mode);
        let w = clus_softmax(p, pos_mean, neg_centers, tau, mode);
        // d/dp = sum_j w_j c_j / tau - c_mean / tau
        let mut g: Vec<f64> = pos_mean.iter().map(|c| (w[0] - 1.0) * c).collect();
        for (wj, c) in w[1..].iter().zip(neg_centers) {
            g.iter_mut().zip(c).for_each(|(gi, ci)| *gi += wj * ci);
        }
        g.iter_mut().for_each(|gi| *gi *= scale / t);
        grads.push(g);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::numeric("contrastive loss is not finite"));
    }
    Ok(ClusLoss {
        loss,
        grads,
        skipped: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLoss {
    pub loss: f64,
    /// Gradient with respect to each input.
    pub grads: Vec<f64>,
    pub skipped: bool,
}

/// Mean binary cross-entropy on logits, in the overflow-free form.
pub fn class_loss(logits: &[f64], targets: &[f64]) -> Result<ScalarLoss> {
    if logits.len() != targets.len() {
        return Err(Error::input("class_loss: logits and targets differ in length"));
    }
    if logits.is_empty() {
        return Ok(ScalarLoss {
            loss: 0.0,
            grads: Vec::new(),
            skipped: true,
        });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grads.push((sigmoid(z) - t) / n);
    }
    Ok(ScalarLoss {
        loss: loss / n,
        grads,
        skipped: false,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 (beta = 1) summed over the four coordinates, averaged over boxes.
pub fn box_loss(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<(f64, Vec<[f64; 4]>, bool)> {
    if pred.len() != target.len() {
        return Err(Error::input("box_loss: prediction and target counts differ"));
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new(), true));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let mut g = [0.0; 4];
        for c in 0..4 {
            let x = p[c] - t[c];
            if x.abs() < 1.0 {
                loss += 0.5 * x * x;
                g[c] = x / n;
            } else {
                loss += x.abs() - 0.5;
                g[c] = x.signum() / n;
            }
        }
        grads.push(g);
    }
    Ok((loss / n, grads, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCounts {
    pub samples: usize,
    pub pos_centers: usize,
    pub neg_centers: usize,
    pub pos_anchors: usize,
    pub neg_anchors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_clus: f64,
    pub l_class: f64,
    pub l_box: f64,
    pub total: f64,
    pub lambdas: [f64; 3],
    pub tau: f64,
    pub counts: LossCounts,
    pub clus_skipped: bool,
}

/// `lambda1 * l_clus + lambda2 * l_class + lambda3 * l_box`.
pub fn total_loss(l_clus: f64, l_class: f64, l_box: f64, lambdas: [f64; 3]) -> Result<f64> {
    if lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::input(format!("loss weights must be >= 0, got {lambdas:?}")));
    }
    let parts = [l_clus, l_class, l_box];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite loss component {parts:?}")));
    }
    Ok(lambdas[0] * l_clus + lambdas[1] * l_class + lambdas[2] * l_box)
}

impl LossReport {
    pub fn new(
        l_clus: f64,
        l_class: f64,
        l_box: f64,
        lambdas: [f64; 3],
        tau: Temperature,
        counts: LossCounts,
        clus_skipped: bool,
    ) -> Result<Self> {
        Ok(LossReport {
            total: total_loss(l_clus, l_class, l_box, lambdas)?,
            l_clus,
            l_class,
            l_box,
            lambdas,
            tau: tau.get(),
            counts,
            clus_skipped,
        })
    }
}
