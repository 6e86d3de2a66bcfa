//! Inference (decode, clip, NMS), greedy matching, precision/recall/F1, COCO-style
//! AP/AR, and feature embeddings for inspection.

mod embed;
mod probe;

use serde::{Deserialize, Serialize};

use crate::dataset::GrayImage;
use crate::error::{Error, Result};
use crate::geometry::{decode_box, generate_anchors, iou_unchecked, nms, BBox};
use crate::lossfns::sigmoid;
use crate::netcore::{forward, ExtractorParams, STRIDE};

pub use embed::{embed_2d, save_embedding_csv, write_embedding_csv, Embedding, EmbeddedPoint};
pub use probe::{collect_features, linear_probe, FeatureSelection, ProbeResult};

/// Largest log-scale a decoded box may grow by.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Detections for one image, highest score first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionResult {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl DetectionResult {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Sorts by score descending (stable) after checking lengths and ranges.
    pub fn new(boxes: Vec<BBox>, scores: Vec<f64>) -> Result<Self> {
        if boxes.len() != scores.len() {
            return Err(Error::input("boxes and scores differ in length"));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::input("scores must lie in [0, 1]"));
        }
        for b in &boxes {
            b.validate()?;
        }
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(DetectionResult {
            boxes: order.iter().map(|&i| boxes[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub anchor_sizes: Vec<usize>,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for Detector {
    fn default() -> Self {
        Detector {
            anchor_sizes: vec![16, 24, 32],
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_detections: 100,
        }
    }
}

impl Detector {
    pub fn infer(&self, params: &ExtractorParams, image: &GrayImage) -> Result<DetectionResult> {
        let a = self.anchor_sizes.len();
        if a != params.anchors_per_cell() {
            return Err(Error::input(format!(
                "{} anchor sizes given but the checkpoint predicts {} per cell",
                a,
                params.anchors_per_cell()
            )));
        }
        let pass = forward(params, &image.to_tensor())?;
        let (mh, mw) = (pass.objectness.shape()[1], pass.objectness.shape()[2]);
        let hw = mh * mw;
        let anchors = generate_anchors(mh, mw, STRIDE, &self.anchor_sizes)?;
        let (obj, del) = (pass.objectness.data(), pass.deltas.data());
        let (w, h) = (image.width as f64, image.height as f64);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (k, anchor) in anchors.iter().enumerate() {
            let (cell, size) = (k / a, k % a);
            let score = sigmoid(obj[size * hw + cell]);
            if score < self.score_thresh {
                continue;
            }
            let mut d: [f64; 4] = std::array::from_fn(|c| del[(4 * size + c) * hw + cell]);
            d[2] = d[2].min(MAX_LOG_SCALE);
            d[3] = d[3].min(MAX_LOG_SCALE);
            let Ok(b) = decode_box(anchor, &d) else { continue };
            if let Some(b) = b.clip(w, h) {
                boxes.push(b);
                scores.push(score);
            }
        }
        let keep = nms(&boxes, &scores, self.nms_thresh)?;
        Ok(DetectionResult {
            boxes: keep.iter().take(self.max_detections).map(|&i| boxes[i]).collect(),
            scores: keep.iter().take(self.max_detections).map(|&i| scores[i]).collect(),
        })
    }
}

/// Sigmoid scores, threshold, decode, clip, NMS with the default anchor sizes.
pub fn infer(params: &ExtractorParams, image: &GrayImage, score_thresh: f64, nms_thresh: f64) -> Result<DetectionResult> {
    Detector {
        score_thresh,
        nms_thresh,
        ..Detector::default()
    }
    .infer(params, image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy one-to-one matching in the given (score) order; `true` marks a true positive.
pub fn greedy_match(preds: &[BBox], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = iou_unchecked(p, gt);
                if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

pub fn match_predictions(preds: &DetectionResult, gts: &[BBox], iou_thresh: f64) -> MatchCounts {
    let flags = greedy_match(&preds.boxes, gts, iou_thresh);
    let tp = flags.iter().filter(|&&f| f).count();
    MatchCounts {
        tp,
        fp: flags.len() - tp,
        fn_: gts.len() - tp,
    }
}

/// Precision, recall and their harmonic mean; empty denominators give 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouAp {
    pub iou: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar50: f64,
    pub precision50: f64,
    pub recall50: f64,
    pub f1_50: f64,
    pub per_iou: Vec<IouAp>,
    /// Set when there were no ground-truth boxes; every metric is then 0.
    pub no_ground_truth: bool,
}

struct Scored {
    score: f64,
    tp: bool,
}

fn scored_matches(preds: &[DetectionResult], gts: &[Vec<BBox>], iou_thresh: f64) -> Vec<Scored> {
    let mut all = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let flags = greedy_match(&p.boxes, g, iou_thresh);
        all.extend(p.scores.iter().zip(flags).map(|(&score, tp)| Scored { score, tp }));
    }
    // stable: ties keep image order, then rank within the image
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all
}

/// 101-point interpolated AP and the final recall at one IoU threshold.
fn ap_at(preds: &[DetectionResult], gts: &[Vec<BBox>], n_gt: usize, iou_thresh: f64) -> (f64, f64) {
    let scored = scored_matches(preds, gts, iou_thresh);
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in &scored {
        if s.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    (sum / 101.0, recall.last().copied().unwrap_or(0.0))
}

/// COCO-style evaluation. `f1_score_thresh` picks the operating point for precision,
/// recall and F1 at IoU 0.5.
pub fn average_precision(
    preds: &[DetectionResult],
    gts: &[Vec<BBox>],
    iou_thresholds: &[f64],
    f1_score_thresh: f64,
) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::input(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::input("IoU thresholds must be nonempty and within [0, 1]"));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(MetricsReport {
            ap: 0.0,
            ap50: 0.0,
            ap75: 0.0,
            ar50: 0.0,
            precision50: 0.0,
            recall50: 0.0,
            f1_50: 0.0,
            per_iou: iou_thresholds.iter().map(|&iou| IouAp { iou, ap: 0.0 }).collect(),
            no_ground_truth: true,
        });
    }
    let per_iou: Vec<IouAp> = iou_thresholds
        .iter()
        .map(|&iou| IouAp {
            iou,
            ap: ap_at(preds, gts, n_gt, iou).0,
        })
        .collect();
    let (ap50, ar50) = ap_at(preds, gts, n_gt, 0.5);
    let (ap75, _) = ap_at(preds, gts, n_gt, 0.75);

    let mut counts = MatchCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        let kept = p.scores.iter().take_while(|&&s| s >= f1_score_thresh).count();
        let c = match_predictions(
            &DetectionResult {
                boxes: p.boxes[..kept].to_vec(),
                scores: p.scores[..kept].to_vec(),
            },
            g,
            0.5,
        );
        counts.tp += c.tp;
        counts.fp += c.fp;
        counts.fn_ += c.fn_;
    }
    let (precision50, recall50, f1_50) = precision_recall_f1(counts.tp, counts.fp, counts.fn_);
    Ok(MetricsReport {
        ap: per_iou.iter().map(|x| x.ap).sum::<f64>() / per_iou.len() as f64,
        ap50,
        ap75,
        ar50,
        precision50,
        recall50,
        f1_50,
        per_iou,
        no_ground_truth: false,
    })
}

/// Runs `detector` over a dataset and scores it.
pub fn evaluate(
    params: &ExtractorParams,
    samples: &[crate::dataset::ImageSample],
    detector: &Detector,
    f1_score_thresh: f64,
) -> Result<MetricsReport> {
    let preds = samples
        .iter()
        .map(|s| detector.infer(params, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<BBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    average_precision(&preds, &gts, &coco_iou_thresholds(), f1_score_thresh)
}
