use rand::seq::index::sample;

use crate::dataset::{ImageSample, Source};
use crate::error::{Error, Result};
use crate::geometry::{assign_anchors, generate_anchors, AnchorLabel, MatchPolicy};
use crate::lossfns::sigmoid;
use crate::netcore::{forward, ExtractorParams, STRIDE};
use crate::roipool::{l2_normalize, roi_align, FeatureRole, FeatureVector, DEFAULT_OUT_SIZE};
use crate::seeding::{stream, Domain};

/// How features are read off images outside training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSelection {
    pub anchor_sizes: Vec<usize>,
    pub match_policy: MatchPolicy,
    /// Negative anchors kept per rubbing image, drawn uniformly.
    pub neg_per_image: usize,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection {
            anchor_sizes: vec![16, 24, 32],
            match_policy: MatchPolicy::dense(),
            neg_per_image: 32,
            normalize: true,
            seed: 0,
        }
    }
}

/// Per-image RoI features: rubbing images give sample (positive anchor) and negative
/// features, font images give positive features.
pub fn collect_features(
    params: &ExtractorParams,
    images: &[ImageSample],
    sel: &FeatureSelection,
) -> Result<Vec<Vec<(FeatureRole, FeatureVector)>>> {
    if sel.anchor_sizes.len() != params.anchors_per_cell() {
        return Err(Error::input("anchor sizes do not match the checkpoint"));
    }
    images
        .iter()
        .enumerate()
        .map(|(idx, s)| {
            let pass = forward(params, &s.image.to_tensor())?;
            let f = &pass.features;
            let anchors = generate_anchors(f.height(), f.width(), STRIDE, &sel.anchor_sizes)?;
            let assignment = assign_anchors(&anchors, &s.boxes, &sel.match_policy)?;
            let positives = assignment.indices(AnchorLabel::Positive);
            let mut picked: Vec<(FeatureRole, usize)> = Vec::new();
            match s.source {
                Source::FontLibrary => picked.extend(positives.iter().map(|&k| (FeatureRole::Positive, k))),
                Source::Rubbing => {
                    picked.extend(positives.iter().map(|&k| (FeatureRole::Sample, k)));
                    let negs = assignment.indices(AnchorLabel::Negative);
                    let mut rng = stream(sel.seed, Domain::Probe, idx as u64);
                    let mut chosen = sample(&mut rng, negs.len(), sel.neg_per_image.min(negs.len())).into_vec();
                    chosen.sort_unstable();
                    picked.extend(chosen.into_iter().map(|i| (FeatureRole::Negative, negs[i])));
                }
            }
            let mut out = Vec::with_capacity(picked.len());
            for (role, k) in picked {
                let v = roi_align(f, &anchors[k], DEFAULT_OUT_SIZE)?;
                let v = if sel.normalize { l2_normalize(&v) } else { v };
                if !v.degenerate {
                    out.push((role, v));
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Balanced accuracy on the training split.
    pub train_accuracy: f64,
    /// Balanced accuracy on the held-out split.
    pub test_accuracy: f64,
}

const PROBE_ITERS: usize = 500;
const PROBE_L2: f64 = 1e-4;

fn balanced_accuracy(w: &[f64], bias: f64, data: &[(Vec<f64>, bool)]) -> f64 {
    let (mut hit, mut tot) = ([0usize; 2], [0usize; 2]);
    for (x, y) in data {
        let z: f64 = bias + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        let c = usize::from(*y);
        tot[c] += 1;
        if (z > 0.0) == *y {
            hit[c] += 1;
        }
    }
    let rate = |c: usize| if tot[c] == 0 { 0.0 } else { hit[c] as f64 / tot[c] as f64 };
    match (tot[0], tot[1]) {
        (0, _) => rate(1),
        (_, 0) => rate(0),
        _ => 0.5 * (rate(0) + rate(1)),
    }
}

/// Class-balanced L2-regularized logistic regression fit by Nesterov gradient descent.
pub fn linear_probe(train: &[(Vec<f64>, bool)], test: &[(Vec<f64>, bool)]) -> Result<ProbeResult> {
    let pos = train.iter().filter(|t| t.1).count();
    let neg = train.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input("probe training data needs both classes"));
    }
    let d = train[0].0.len();
    if train.iter().chain(test).any(|t| t.0.len() != d) {
        return Err(Error::input("probe features have inconsistent dimensions"));
    }
    let weight = |y: bool| if y { 0.5 / pos as f64 } else { 0.5 / neg as f64 };
    let max_sq = train
        .iter()
        .map(|t| t.0.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.25 * (max_sq + 1.0) + PROBE_L2);

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (mut w_prev, mut b_prev) = (w.clone(), b);
    let mut gw = vec![0.0; d];
    for it in 0..PROBE_ITERS {
        let mom = it as f64 / (it as f64 + 3.0);
        let yw: Vec<f64> = w.iter().zip(&w_prev).map(|(a, p)| a + mom * (a - p)).collect();
        let yb = b + mom * (b - b_prev);
        gw.iter_mut().zip(&yw).for_each(|(g, v)| *g = PROBE_L2 * v);
        let mut gb = 0.0;
        for (x, y) in train {
            let z = yb + x.iter().zip(&yw).map(|(a, c)| a * c).sum::<f64>();
            let r = weight(*y) * (sigmoid(z) - f64::from(u8::from(*y)));
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v);
            gb += r;
        }
        w_prev = std::mem::replace(&mut w, yw.iter().zip(&gw).map(|(v, g)| v - step * g).collect());
        b_prev = b;
        b = yb - step * gb;
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("probe weights diverged"));
    }
    Ok(ProbeResult {
        train_accuracy: balanced_accuracy(&w, b, train),
        test_accuracy: balanced_accuracy(&w, b, test),
    })
}
