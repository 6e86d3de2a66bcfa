use rand::Rng;

use super::TrainConfig;
use crate::clustering::{self, ClusterMethod, ClusterSpec};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::geometry::{assign_anchors, encode_box, generate_anchors, AnchorLabel, BBox};
use crate::lossfns::{box_loss, class_loss, clus_loss, LossCounts, LossReport};
use crate::netcore::{backward, forward, ExtractorParams, ForwardPass, Tensor, STRIDE};
use crate::roipool::{l2_normalize, l2_normalize_backward, RoiSampler, DEFAULT_OUT_SIZE};
use crate::seeding::{stream, Domain};

/// Anchor decisions for one rubbing image. Nothing here depends on the weights.
#[derive(Debug, Clone)]
pub struct RubbingPlan {
    pub image: Tensor,
    pub anchors: Vec<BBox>,
    /// `(anchor, target)` for every positive (1) and negative (0) anchor.
    pub labeled: Vec<(usize, f64)>,
    /// `(anchor, encoded gt)` for every positive anchor.
    pub positives: Vec<(usize, [f64; 4])>,
    /// Negative anchors pooled for clustering, lowest IoU first.
    pub cluster_negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FontPlan {
    pub image: Tensor,
    pub positive_boxes: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct StepPlan {
    pub iteration: u64,
    pub rubbing: Vec<RubbingPlan>,
    pub fonts: Vec<FontPlan>,
    /// Whether the contrastive path runs this step.
    pub contrastive: bool,
}

/// Detached cluster centers for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub pos_mean: Vec<f64>,
    pub neg_centers: Vec<Vec<f64>>,
    pub pos_clusters: usize,
    pub neg_clusters: usize,
    pub neg_inertia: f64,
    pub pos_inertia: f64,
    /// A cluster count was reduced to the number of available features.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FeatureCounts {
    pub samples: usize,
    pub negatives: usize,
    pub positives: usize,
}

/// Loss and gradient of one step at fixed plan and centers.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub report: LossReport,
    pub grads: ExtractorParams,
}

fn anchor_grid(image: &Tensor, sizes: &[usize]) -> Result<Vec<BBox>> {
    let s = image.shape();
    if s.len() != 3 || s[1] % STRIDE != 0 || s[2] % STRIDE != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::input(format!(
            "image shape {s:?} is not 1xHxW with sides a multiple of {STRIDE}"
        )));
    }
    generate_anchors(s[1] / STRIDE, s[2] / STRIDE, STRIDE, sizes)
}

/// Matches anchors on the batch and picks the negatives used for clustering.
pub fn plan_step(
    config: &TrainConfig,
    rubbing: &[&ImageSample],
    fonts: &[&ImageSample],
    iteration: u64,
    contrastive: bool,
) -> Result<StepPlan> {
    if rubbing.is_empty() {
        return Err(Error::input("empty rubbing batch"));
    }
    let mut rng = stream(config.seed, Domain::NegSubsample, iteration);
    let mut plans = Vec::with_capacity(rubbing.len());
    for sample in rubbing {
        let image = sample.image.to_tensor();
        let anchors = anchor_grid(&image, &config.anchor_sizes)?;
        let assignment = assign_anchors(&anchors, &sample.boxes, &config.match_policy)?;
        let mut labeled = Vec::new();
        let mut positives = Vec::new();
        for (k, label) in assignment.labels.iter().enumerate() {
            match label {
                AnchorLabel::Positive => {
                    labeled.push((k, 1.0));
                    let gt = &sample.boxes[assignment.matched_gt[k].expect("positive anchors have a gt")];
                    positives.push((k, encode_box(&anchors[k], gt)?));
                }
                AnchorLabel::Negative => labeled.push((k, 0.0)),
                AnchorLabel::Ignore => {}
            }
        }
        let mut cluster_negatives = Vec::new();
        if contrastive {
            let mut keyed: Vec<(f64, u64, usize)> = assignment
                .indices(AnchorLabel::Negative)
                .into_iter()
                .map(|k| (assignment.max_iou[k], rng.gen::<u64>(), k))
                .collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cluster_negatives = keyed
                .into_iter()
                .take(config.neg_per_image)
                .map(|t| t.2)
                .collect();
        }
        plans.push(RubbingPlan {
            image,
            anchors,
            labeled,
            positives,
            cluster_negatives,
        });
    }

    let mut font_plans = Vec::new();
    if contrastive {
        for sample in fonts {
            let image = sample.image.to_tensor();
            let anchors = anchor_grid(&image, &config.anchor_sizes)?;
            let assignment = assign_anchors(&anchors, &sample.boxes, &config.match_policy)?;
            font_plans.push(FontPlan {
                image,
                positive_boxes: assignment
                    .indices(AnchorLabel::Positive)
                    .into_iter()
                    .map(|k| anchors[k])
                    .collect(),
            });
        }
    }
    Ok(StepPlan {
        iteration,
        rubbing: plans,
        fonts: font_plans,
        contrastive,
    })
}

struct SampleFeature {
    image: usize,
    sampler: RoiSampler,
    raw: Vec<f64>,
    value: Vec<f64>,
}

fn pooled(pass: &ForwardPass, b: &BBox, normalize: bool) -> Result<Option<(RoiSampler, Vec<f64>, Vec<f64>)>> {
    let sampler = RoiSampler::for_map(&pass.features, b, DEFAULT_OUT_SIZE)?;
    if sampler.is_degenerate() {
        return Ok(None);
    }
    let raw = sampler.pool(&pass.features);
    let value = if normalize { l2_normalize(&raw) } else { raw.clone() };
    if value.degenerate || value.norm() < 1e-12 {
        return Ok(None);
    }
    Ok(Some((sampler, raw.values, value.values)))
}

fn sample_features(plan: &StepPlan, passes: &[ForwardPass], normalize: bool) -> Result<Vec<SampleFeature>> {
    let mut out = Vec::new();
    for (i, (rp, pass)) in plan.rubbing.iter().zip(passes).enumerate() {
        for &(k, _) in &rp.positives {
            if let Some((sampler, raw, value)) = pooled(pass, &rp.anchors[k], normalize)? {
                out.push(SampleFeature {
                    image: i,
                    sampler,
                    raw,
                    value,
                });
            }
        }
    }
    Ok(out)
}

fn negative_features(plan: &StepPlan, passes: &[ForwardPass], normalize: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for (rp, pass) in plan.rubbing.iter().zip(passes) {
        for &k in &rp.cluster_negatives {
            if let Some((_, _, v)) = pooled(pass, &rp.anchors[k], normalize)? {
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn positive_features(params: &ExtractorParams, plan: &StepPlan, normalize: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for fp in &plan.fonts {
        let pass = forward(params, &fp.image)?;
        for b in &fp.positive_boxes {
            if let Some((_, _, v)) = pooled(&pass, b, normalize)? {
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn cluster_group(points: &[Vec<f64>], k: usize, base: &ClusterSpec, seed: u64) -> Result<(Vec<Vec<f64>>, f64)> {
    let spec = ClusterSpec {
        k,
        seed,
        ..base.clone()
    };
    let model = clustering::fit(points, &spec)?;
    Ok((model.centers, model.inertia))
}

fn fit_centers(
    config: &TrainConfig,
    iteration: u64,
    negatives: &[Vec<f64>],
    positives: &[Vec<f64>],
) -> Result<Option<Centers>> {
    if negatives.is_empty() || positives.is_empty() {
        return Ok(None);
    }
    let mut rng = stream(config.seed, Domain::Clustering, iteration);
    let (neg_seed, pos_seed) = (rng.gen::<u64>(), rng.gen::<u64>());
    let neg_k = config.n_neg_clusters.min(negatives.len());
    let pos_k = config.m_pos_clusters.min(positives.len());
    let clamped = config.cluster_method.method == ClusterMethod::KMeans
        && (neg_k < config.n_neg_clusters || pos_k < config.m_pos_clusters);
    let (neg_centers, neg_inertia) = cluster_group(negatives, neg_k, &config.cluster_method, neg_seed)?;
    let (pos_centers, pos_inertia) = cluster_group(positives, pos_k, &config.cluster_method, pos_seed)?;
    if neg_centers.is_empty() || pos_centers.is_empty() {
        // density clustering can label everything as noise
        return Ok(None);
    }
    Ok(Some(Centers {
        pos_mean: clustering::positive_mean(&pos_centers, false)?,
        pos_clusters: pos_centers.len(),
        neg_clusters: neg_centers.len(),
        neg_centers,
        neg_inertia,
        pos_inertia,
        clamped,
    }))
}

/// Forwards the batch and fits this step's centers.
pub fn step_centers(
    params: &ExtractorParams,
    plan: &StepPlan,
    config: &TrainConfig,
) -> Result<(Option<Centers>, FeatureCounts)> {
    let passes = plan
        .rubbing
        .iter()
        .map(|rp| forward(params, &rp.image))
        .collect::<Result<Vec<_>>>()?;
    centers_from_passes(params, plan, config, &passes)
}

fn centers_from_passes(
    params: &ExtractorParams,
    plan: &StepPlan,
    config: &TrainConfig,
    passes: &[ForwardPass],
) -> Result<(Option<Centers>, FeatureCounts)> {
    if !plan.contrastive {
        return Ok((None, FeatureCounts::default()));
    }
    let negatives = negative_features(plan, passes, config.normalize_features)?;
    let positives = positive_features(params, plan, config.normalize_features)?;
    let counts = FeatureCounts {
        samples: 0,
        negatives: negatives.len(),
        positives: positives.len(),
    };
    Ok((fit_centers(config, plan.iteration, &negatives, &positives)?, counts))
}

/// Upstream gradients for one image: features, objectness, deltas.
struct Upstream {
    features: Option<Tensor>,
    objectness: Tensor,
    deltas: Tensor,
}

struct Objective {
    report: LossReport,
    upstream: Vec<Upstream>,
}

fn objective(
    plan: &StepPlan,
    passes: &[ForwardPass],
    centers: Option<&Centers>,
    config: &TrainConfig,
) -> Result<Objective> {
    let [l1, l2, l3] = config.lambdas;
    let a = config.anchor_sizes.len();

    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut preds = Vec::new();
    let mut box_targets = Vec::new();
    for (rp, pass) in plan.rubbing.iter().zip(passes) {
        let hw = pass.objectness.shape()[1] * pass.objectness.shape()[2];
        for &(k, t) in &rp.labeled {
            logits.push(pass.objectness.data()[(k % a) * hw + k / a]);
            targets.push(t);
        }
        for &(k, target) in &rp.positives {
            let d = pass.deltas.data();
            let (cell, size) = (k / a, k % a);
            preds.push(std::array::from_fn(|c| d[(4 * size + c) * hw + cell]));
            box_targets.push(target);
        }
    }
    let class = class_loss(&logits, &targets)?;
    let (l_box, box_grads, _) = box_loss(&preds, &box_targets)?;

    let mut upstream: Vec<Upstream> = passes
        .iter()
        .map(|p| Upstream {
            features: None,
            objectness: Tensor::zeros(p.objectness.shape()),
            deltas: Tensor::zeros(p.deltas.shape()),
        })
        .collect();
    let (mut ci, mut bi) = (0, 0);
    for ((rp, pass), up) in plan.rubbing.iter().zip(passes).zip(upstream.iter_mut()) {
        let hw = pass.objectness.shape()[1] * pass.objectness.shape()[2];
        let go = up.objectness.data_mut();
        for &(k, _) in &rp.labeled {
            go[(k % a) * hw + k / a] += l2 * class.grads[ci];
            ci += 1;
        }
        let gd = up.deltas.data_mut();
        for &(k, _) in &rp.positives {
            let (cell, size) = (k / a, k % a);
            for c in 0..4 {
                gd[(4 * size + c) * hw + cell] += l3 * box_grads[bi][c];
            }
            bi += 1;
        }
    }

    let mut l_clus = 0.0;
    let mut clus_skipped = true;
    let mut n_samples = 0;
    if let (true, Some(c)) = (plan.contrastive, centers) {
        let samples = sample_features(plan, passes, config.normalize_features)?;
        n_samples = samples.len();
        let values: Vec<Vec<f64>> = samples.iter().map(|s| s.value.clone()).collect();
        let clus = clus_loss(&values, &c.pos_mean, &c.neg_centers, config.tau, config.denominator_mode)?;
        l_clus = clus.loss;
        clus_skipped = clus.skipped;
        if !clus.skipped {
            for (s, g) in samples.iter().zip(&clus.grads) {
                let g: Vec<f64> = if config.normalize_features {
                    l2_normalize_backward(&s.raw, g)
                } else {
                    g.clone()
                };
                let scaled: Vec<f64> = g.iter().map(|v| l1 * v).collect();
                let gf = upstream[s.image]
                    .features
                    .get_or_insert_with(|| Tensor::zeros(passes[s.image].features.tensor.shape()));
                s.sampler.accumulate_grad(&scaled, gf);
            }
        }
    }

    let counts = LossCounts {
        samples: n_samples,
        pos_centers: centers.map_or(0, |c| c.pos_clusters),
        neg_centers: centers.map_or(0, |c| c.neg_clusters),
        pos_anchors: preds.len(),
        neg_anchors: targets.iter().filter(|&&t| t == 0.0).count(),
    };
    let report = LossReport::new(l_clus, class.loss, l_box, config.lambdas, config.tau, counts, clus_skipped)?;
    Ok(Objective { report, upstream })
}

fn accumulate_backward(
    params: &ExtractorParams,
    passes: &[ForwardPass],
    upstream: &[Upstream],
    mut select: impl FnMut(&Upstream) -> (Option<Tensor>, Tensor, Tensor),
) -> Result<ExtractorParams> {
    let mut total = ExtractorParams::zeros(params.anchors_per_cell());
    for (pass, up) in passes.iter().zip(upstream) {
        let (gf, go, gd) = select(up);
        let g = backward(params, pass, gf.as_ref(), &go, &gd)?;
        total.axpy(1.0, &g);
    }
    Ok(total)
}

fn forward_rubbing(params: &ExtractorParams, plan: &StepPlan) -> Result<Vec<ForwardPass>> {
    plan.rubbing.iter().map(|rp| forward(params, &rp.image)).collect()
}

/// Loss and gradient at `params` with matching and centers held fixed.
pub fn evaluate_step(
    params: &ExtractorParams,
    plan: &StepPlan,
    centers: Option<&Centers>,
    config: &TrainConfig,
) -> Result<StepEval> {
    let passes = forward_rubbing(params, plan)?;
    let obj = objective(plan, &passes, centers, config)?;
    let grads = accumulate_backward(params, &passes, &obj.upstream, |u| {
        (u.features.clone(), u.objectness.clone(), u.deltas.clone())
    })?;
    Ok(StepEval {
        report: obj.report,
        grads,
    })
}

/// The gradient split into its detection (class + box) and contrastive parts.
pub fn component_grads(
    params: &ExtractorParams,
    plan: &StepPlan,
    centers: Option<&Centers>,
    config: &TrainConfig,
) -> Result<(ExtractorParams, ExtractorParams)> {
    let passes = forward_rubbing(params, plan)?;
    let obj = objective(plan, &passes, centers, config)?;
    let detection = accumulate_backward(params, &passes, &obj.upstream, |u| {
        (None, u.objectness.clone(), u.deltas.clone())
    })?;
    let contrastive = accumulate_backward(params, &passes, &obj.upstream, |u| {
        (
            u.features.clone(),
            Tensor::zeros(u.objectness.shape()),
            Tensor::zeros(u.deltas.shape()),
        )
    })?;
    Ok((detection, contrastive))
}

pub(crate) struct StepOutput {
    pub eval: StepEval,
    pub centers: Option<Centers>,
    pub features: FeatureCounts,
}

/// One full step without the optimizer update.
pub(crate) fn run_step(params: &ExtractorParams, plan: &StepPlan, config: &TrainConfig) -> Result<StepOutput> {
    let passes = forward_rubbing(params, plan)?;
    let (centers, mut features) = centers_from_passes(params, plan, config, &passes)?;
    let obj = objective(plan, &passes, centers.as_ref(), config)?;
    features.samples = obj.report.counts.samples;
    let grads = accumulate_backward(params, &passes, &obj.upstream, |u| {
        (u.features.clone(), u.objectness.clone(), u.deltas.clone())
    })?;
    Ok(StepOutput {
        eval: StepEval {
            report: obj.report,
            grads,
        },
        centers,
        features,
    })
}
