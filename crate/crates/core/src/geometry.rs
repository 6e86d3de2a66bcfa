//! Boxes, IoU, anchors, anchor labeling, box deltas and greedy NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle given by its upper-left and lower-right corners, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or degenerate corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::input(format!("box has non-finite corner: {self:?}")));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::input(format!("degenerate box: {self:?}")));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing with positive area is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Square anchors of every size centered on every feature-map cell.
///
/// Order is row-major over cells, then by size, so anchor `(i * map_w + j) * sizes.len() + a`
/// lives at row `i`, column `j` with side `sizes[a]`.
pub fn generate_anchors(map_h: usize, map_w: usize, stride: usize, sizes: &[usize]) -> Result<Vec<BBox>> {
    if map_h == 0 || map_w == 0 || stride == 0 {
        return Err(Error::input("anchor grid dimensions and stride must be >= 1"));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::input("anchor sizes must be nonempty and positive"));
    }
    let stride = stride as f64;
    let mut anchors = Vec::with_capacity(map_h * map_w * sizes.len());
    for i in 0..map_h {
        for j in 0..map_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in sizes {
                let half = 0.5 * s as f64;
                anchors.push(BBox {
                    x1: cx - half,
                    y1: cy - half,
                    x2: cx + half,
                    y2: cy + half,
                });
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Dense,
    Sparse,
}

/// IoU thresholds used to label anchors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchPolicy {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub regime: Regime,
}

impl MatchPolicy {
    pub fn dense() -> Self {
        MatchPolicy {
            pos_threshold: 0.5,
            neg_threshold: 0.3,
            regime: Regime::Dense,
        }
    }

    pub fn sparse() -> Self {
        MatchPolicy {
            pos_threshold: 0.3,
            neg_threshold: 0.3,
            regime: Regime::Sparse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.pos_threshold > 0.0
            && self.pos_threshold <= 1.0
            && self.neg_threshold >= 0.0
            && self.neg_threshold < 1.0
            && self.neg_threshold <= self.pos_threshold;
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!("invalid match policy: {self:?}")))
        }
    }
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy::dense()
    }
}

/// Per-anchor outcome of matching against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index each anchor overlaps most (or was forced onto).
    pub matched_gt: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl AnchorAssignment {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn indices(&self, label: AnchorLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels anchors by their best IoU over `gt`; see [`assign_anchors`] for the full result.
pub fn match_anchors(anchors: &[BBox], gt: &[BBox], policy: &MatchPolicy) -> Result<Vec<AnchorLabel>> {
    Ok(assign_anchors(anchors, gt, policy)?.labels)
}

pub fn assign_anchors(anchors: &[BBox], gt: &[BBox], policy: &MatchPolicy) -> Result<AnchorAssignment> {
    policy.validate()?;
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched_gt = vec![None; n];
    let mut max_iou = vec![0.0; n];
    if gt.is_empty() {
        return Ok(AnchorAssignment {
            labels,
            matched_gt,
            max_iou,
        });
    }

    // best anchor per gt, lowest index on ties
    let mut best_for_gt = vec![(0usize, -1.0f64); gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (None, 0.0);
        for (gi, g) in gt.iter().enumerate() {
            let v = iou_unchecked(a, g);
            if best.0.is_none() || v > best.1 {
                best = (Some(gi), v);
            }
            if v > best_for_gt[gi].1 {
                best_for_gt[gi] = (ai, v);
            }
        }
        max_iou[ai] = best.1;
        matched_gt[ai] = best.0;
        labels[ai] = if best.1 >= policy.pos_threshold {
            AnchorLabel::Positive
        } else if best.1 < policy.neg_threshold {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (gi, &(ai, v)) in best_for_gt.iter().enumerate() {
        if v > 0.0 && labels[ai] != AnchorLabel::Positive {
            labels[ai] = AnchorLabel::Positive;
            matched_gt[ai] = Some(gi);
        }
    }
    Ok(AnchorAssignment {
        labels,
        matched_gt,
        max_iou,
    })
}

/// Center/size deltas of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    anchor.validate()?;
    gt.validate()?;
    let (cxa, cya) = anchor.center();
    let (cx, cy) = gt.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    Ok([
        (cx - cxa) / wa,
        (cy - cya) / ha,
        (gt.width() / wa).ln(),
        (gt.height() / ha).ln(),
    ])
}

/// Inverse of [`encode_box`].
pub fn decode_box(anchor: &BBox, deltas: &[f64; 4]) -> Result<BBox> {
    anchor.validate()?;
    let (cxa, cya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = cxa + deltas[0] * wa;
    let cy = cya + deltas[1] * ha;
    let w = wa * deltas[2].exp();
    let h = ha * deltas[3].exp();
    let b = BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    };
    b.validate()
        .map_err(|_| Error::numeric(format!("decoded box is not usable: {b:?} from {deltas:?}")))?;
    Ok(b)
}

/// Greedy non-maximum suppression. Returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::input(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep
            .iter()
            .all(|&k| iou_unchecked(&boxes[k], &boxes[i]) <= iou_thresh)
        {
            keep.push(i);
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)).unwrap(), 0.0);
        let v = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let bad = BBox {
            x1: 1.0,
            y1: 0.0,
            x2: 1.0,
            y2: 2.0,
        };
        assert!(matches!(iou(&bad, &b(0., 0., 1., 1.)), Err(Error::Input(_))));
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn anchor_examples() {
        let a = generate_anchors(1, 1, 8, &[16]).unwrap();
        assert_eq!(a, vec![b(-4., -4., 12., 12.)]);
        assert_eq!(generate_anchors(2, 2, 8, &[16]).unwrap().len(), 4);
        let two = generate_anchors(1, 1, 8, &[16, 32]).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].center(), two[1].center());
        assert!(generate_anchors(0, 1, 8, &[16]).is_err());
        assert!(generate_anchors(1, 1, 8, &[]).is_err());
    }

    #[test]
    fn anchor_order_is_row_major_then_size() {
        let a = generate_anchors(2, 3, 8, &[8, 16]).unwrap();
        // row 1, col 2, size index 1
        let idx = (3 + 2) * 2 + 1;
        assert_eq!(a[idx].center(), (20.0, 12.0));
        assert_eq!(a[idx].width(), 16.0);
    }

    #[test]
    fn matching_examples() {
        let policy = MatchPolicy::dense();
        let g = b(0., 0., 10., 10.);
        let labels = match_anchors(&[g], &[g], &policy).unwrap();
        assert_eq!(labels, vec![AnchorLabel::Positive]);

        // index 0 is the forced positive (disjoint anchor stays negative)
        let labels = match_anchors(&[g, b(50., 50., 60., 60.)], &[g], &policy).unwrap();
        assert_eq!(labels[1], AnchorLabel::Negative);

        // IoU 0.4: inter 40*10/(100+100-x)... use a 10x10 gt and a shifted 10x10 anchor.
        // shift by dx gives IoU (10-dx)/(10+dx) = 0.4 at dx = 30/7
        let dx = 30.0 / 7.0;
        let a = b(dx, 0., 10. + dx, 10.);
        assert!((iou(&a, &g).unwrap() - 0.4).abs() < 1e-12);
        // a perfect anchor takes the forced positive slot, leaving the 0.4 one ignored
        let labels = match_anchors(&[g, a], &[g], &policy).unwrap();
        assert_eq!(labels, vec![AnchorLabel::Positive, AnchorLabel::Ignore]);
    }

    #[test]
    fn forced_positive_and_tie_break() {
        let policy = MatchPolicy::dense();
        let g = b(0., 0., 10., 10.);
        // two anchors with identical, low IoU: the lower index is forced positive
        let a0 = b(-5., 0., 5., 10.);
        let a1 = b(5., 0., 15., 10.);
        let out = assign_anchors(&[a0, a1], &[g], &policy).unwrap();
        assert_eq!(out.labels, vec![AnchorLabel::Positive, AnchorLabel::Ignore]);
        assert_eq!(out.matched_gt[0], Some(0));
    }

    #[test]
    fn empty_gt_is_all_negative() {
        let anchors = generate_anchors(3, 3, 8, &[16]).unwrap();
        let labels = match_anchors(&anchors, &[], &MatchPolicy::sparse()).unwrap();
        assert!(labels.iter().all(|&l| l == AnchorLabel::Negative));
    }

    #[test]
    fn invalid_policy_rejected() {
        let p = MatchPolicy {
            pos_threshold: 0.2,
            neg_threshold: 0.4,
            regime: Regime::Dense,
        };
        assert!(match_anchors(&[], &[], &p).is_err());
    }

    #[test]
    fn encode_decode_identity() {
        let a = b(3., 4., 19., 30.);
        assert_eq!(encode_box(&a, &a).unwrap(), [0.0; 4]);
        assert_eq!(decode_box(&a, &[0.0; 4]).unwrap(), a);
        assert!(matches!(
            decode_box(&a, &[0.0, 0.0, f64::NEG_INFINITY, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(decode_box(&a, &[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rand_box = |rng: &mut rand_chacha::ChaCha8Rng| {
            let x1 = rng.gen_range(-50.0..200.0);
            let y1 = rng.gen_range(-50.0..200.0);
            b(x1, y1, x1 + rng.gen_range(0.5..120.0), y1 + rng.gen_range(0.5..120.0))
        };
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a = rand_box(&mut rng);
            let g = rand_box(&mut rng);
            let back = decode_box(&a, &encode_box(&a, &g).unwrap()).unwrap();
            for (u, v) in back.to_array().iter().zip(g.to_array()) {
                worst = worst.max((u - v).abs());
            }
        }
        assert!(worst <= 1e-9, "max round-trip error {worst}");
    }

    #[test]
    fn nms_examples() {
        let a = b(0., 0., 10., 10.);
        assert_eq!(nms(&[a], &[0.1], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.9, 0.8], 0.5).unwrap(), vec![0]);
        let far = b(100., 100., 110., 110.);
        assert_eq!(nms(&[a, far], &[0.1, 0.9], 0.5).unwrap(), vec![1, 0]);
        // equal scores: lower index first
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.5).unwrap(), vec![0]);
        assert!(nms(&[a], &[], 0.5).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.01..80.0f64, 0.01..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let u = iou(&a, &c).unwrap();
            let v = iou(&c, &a).unwrap();
            prop_assert_eq!(u, v);
            prop_assert!((0.0..=1.0).contains(&u));
            if a != c {
                prop_assert!(u < 1.0);
            } else {
                prop_assert_eq!(u, 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn matching_partitions_anchors(
            gts in proptest::collection::vec(arb_box(), 0..4),
            h in 1usize..5, w in 1usize..5,
        ) {
            let anchors = generate_anchors(h, w, 8, &[8, 16]).unwrap();
            let out = assign_anchors(&anchors, &gts, &MatchPolicy::dense()).unwrap();
            prop_assert_eq!(out.labels.len(), anchors.len());
            let total = out.count(AnchorLabel::Positive)
                + out.count(AnchorLabel::Negative)
                + out.count(AnchorLabel::Ignore);
            prop_assert_eq!(total, anchors.len());
            if gts.is_empty() {
                prop_assert_eq!(out.count(AnchorLabel::Positive), 0);
            }
        }

        #[test]
        fn nms_output_sorted_and_separated(
            boxes in proptest::collection::vec(arb_box(), 0..30),
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = boxes.iter().map(|_| rng.gen()).collect();
            let keep = nms(&boxes, &scores, 0.4).unwrap();
            for pair in keep.windows(2) {
                prop_assert!(scores[pair[0]] >= scores[pair[1]]);
            }
            for (i, &a) in keep.iter().enumerate() {
                for &c in &keep[i + 1..] {
                    prop_assert!(iou(&boxes[a], &boxes[c]).unwrap() <= 0.4);
                }
            }
        }
    }
}
