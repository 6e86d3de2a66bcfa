//! Acceptance suite. Each test prints one `PASS`/`FAIL` line with its measured numbers.
//!
//! Run with `cargo test --release --test acceptance`; the lines go to stderr.
//! Exact properties (oracle agreement, identities, determinism) are also asserted.
//! Empirical targets (restart attainment, the separation experiment) print their
//! verdict without aborting the run.
//! The separation experiment takes a few minutes; everything else is quick.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusterdet::clustering::{kmeans_fit, kmeans_restarts, squared_distance, ClusterSpec};
use clusterdet::dataset::{gen_font, gen_rubbing, generate, GenSpec, GrayImage, ImageSample, Source};
use clusterdet::evalkit::{
    average_precision, coco_iou_thresholds, collect_features, evaluate, linear_probe, match_predictions,
    precision_recall_f1, DetectionResult, Detector, FeatureSelection,
};
use clusterdet::geometry::BBox;
use clusterdet::lossfns::{clus_loss_single, DenominatorMode, Temperature};
use clusterdet::netcore::{encode_checkpoint, forward, ExtractorParams, FeatureMap, Tensor};
use clusterdet::roipool::{roi_align, FeatureRole};
use clusterdet::trainer::{
    component_grads, evaluate_step, plan_step, step_centers, train, train_with, write_log, Pipeline, StepPlan,
    TrainConfig,
};

// tolerances
const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-6;
const FD_WEIGHTS: usize = 50;
const KMEANS_RESTARTS: usize = 5;
const KMEANS_OPT_TOL: f64 = 1e-9;
const ROI_TOL: f64 = 1e-6;
const ROI_PAIRS: usize = 1000;
const TAU_LIMIT: f64 = 1e6;
const TAU_LIMIT_TOL: f64 = 1e-3;
const PROBE_GAIN: f64 = 0.05;

/// Writes straight to the stderr handle so the line survives libtest's output capture.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(name: &str, pass: bool, detail: &str) {
    say(&format!("[{name}] {} {detail}", if pass { "PASS" } else { "FAIL" }));
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

// ---------------------------------------------------------------- gradients

/// Activation pattern of every image the step forwards.
fn signature(params: &ExtractorParams, plan: &StepPlan) -> Vec<Vec<u64>> {
    plan.rubbing
        .iter()
        .map(|r| &r.image)
        .chain(plan.fonts.iter().map(|f| &f.image))
        .map(|img| forward(params, img).unwrap().activation_signature())
        .collect()
}

#[test]
fn gradient_check() {
    let start = Instant::now();
    let rub: Vec<ImageSample> = (0..2).map(|i| gen_rubbing(&GenSpec::default(), i).unwrap()).collect();
    let font: Vec<ImageSample> = (0..4).map(|i| gen_font(&GenSpec::font_default(), i).unwrap()).collect();
    let (rr, fr): (Vec<&ImageSample>, Vec<&ImageSample>) = (rub.iter().collect(), font.iter().collect());
    let base_cfg = TrainConfig {
        n_neg_clusters: 8,
        m_pos_clusters: 2,
        obc_count: 4,
        neg_per_image: 32,
        ..TrainConfig::default()
    };
    let params = ExtractorParams::init(3, 3);
    let plan = plan_step(&base_cfg, &rr, &fr, 1, true).unwrap();
    let (centers, _) = step_centers(&params, &plan, &base_cfg).unwrap();
    let centers = centers.expect("contrastive step has centers");

    // extractor weights only; the head does not touch the contrastive term
    let blocks = params.blocks();
    let n_extractor: usize = blocks[..6].iter().map(|t| t.len()).sum();

    // draw weights whose +-h stencil keeps every ReLU/max-pool decision fixed
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sig0 = signature(&params, &plan);
    let mut chosen = Vec::new();
    let mut skipped = 0;
    while chosen.len() < FD_WEIGHTS {
        let i = rng.gen_range(0..n_extractor);
        if chosen.contains(&i) {
            continue;
        }
        let w = params.get_flat(i);
        let smooth = [w + FD_STEP, w - FD_STEP].iter().all(|&v| {
            let mut q = params.clone();
            q.set_flat(i, v);
            signature(&q, &plan) == sig0
        });
        if smooth {
            chosen.push(i);
        } else {
            skipped += 1;
        }
    }

    let mut worst = [0.0f64; 2];
    for tau in [0.1, 0.05, 0.01, 0.005] {
        for (slot, lambdas) in [[1.0, 0.0, 0.0], [1.0, 1.0, 1.0]].into_iter().enumerate() {
            let cfg = TrainConfig {
                tau: Temperature::new(tau).unwrap(),
                lambdas,
                ..base_cfg.clone()
            };
            let analytic = evaluate_step(&params, &plan, Some(&centers), &cfg).unwrap().grads;
            let loss = |i: usize, v: f64| {
                let mut q = params.clone();
                q.set_flat(i, v);
                let r = evaluate_step(&q, &plan, Some(&centers), &cfg).unwrap().report;
                if slot == 0 {
                    r.l_clus
                } else {
                    r.total
                }
            };
            for &i in &chosen {
                let w = params.get_flat(i);
                let num = (loss(i, w + FD_STEP) - loss(i, w - FD_STEP)) / (2.0 * FD_STEP);
                let an = analytic.get_flat(i);
                let rel = (num - an).abs() / num.abs().max(an.abs()).max(1e-300);
                worst[slot] = worst[slot].max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&w| w <= FD_REL_TOL) && secs < 120.0;
    report(
        "gradient_check",
        pass,
        &format!(
            "worst rel err contrastive {:.2e}, total {:.2e} over {FD_WEIGHTS} weights x 4 temperatures \
             ({skipped} kinked draws skipped), {secs:.1}s",
            worst[0], worst[1]
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- k-means

#[derive(serde::Deserialize)]
struct Instances {
    k: usize,
    instances: Vec<Vec<Vec<f64>>>,
}

/// Lowest inertia over every split of the points into two nonempty groups.
fn brute_force_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let sse = |members: &[&Vec<f64>]| -> f64 {
        let mut mean = vec![0.0; d];
        for p in members {
            for (m, v) in mean.iter_mut().zip(p.iter()) {
                *m += v / members.len() as f64;
            }
        }
        members
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum()
    };
    // point 0 always sits in group A, so each split is visited once
    (0..1u32 << (n - 1))
        .filter_map(|mask| {
            let (mut a, mut b) = (vec![&points[0]], Vec::new());
            for (j, p) in points.iter().enumerate().skip(1) {
                if mask >> (j - 1) & 1 == 1 {
                    b.push(p);
                } else {
                    a.push(p);
                }
            }
            (!b.is_empty()).then(|| sse(&a) + sse(&b))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Every point sits at its nearest center, every center is its members' mean and
/// the reported inertia matches; the inertia trace never rises.
fn lloyd_fixed_point(points: &[Vec<f64>], centers: &[Vec<f64>], assign: &[Option<usize>], inertia: f64, trace: &[f64]) -> bool {
    let mut total = 0.0;
    for (p, a) in points.iter().zip(assign) {
        let Some(a) = *a else { return false };
        let own = squared_distance(p, &centers[a]);
        if centers.iter().any(|c| squared_distance(p, c) < own - 1e-12) {
            return false;
        }
        total += own;
    }
    for (j, c) in centers.iter().enumerate() {
        let members: Vec<&Vec<f64>> = points.iter().zip(assign).filter(|(_, a)| **a == Some(j)).map(|x| x.0).collect();
        if members.is_empty() {
            return false;
        }
        for (dim, &cv) in c.iter().enumerate() {
            let mean = members.iter().map(|p| p[dim]).sum::<f64>() / members.len() as f64;
            if (mean - cv).abs() > 1e-9 {
                return false;
            }
        }
    }
    (total - inertia).abs() <= 1e-9 * (1.0 + inertia) && trace.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

#[test]
fn kmeans_oracle() {
    let start = Instant::now();
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/kmeans_instances.json")).unwrap();
    let data: Instances = serde_json::from_str(&text).unwrap();
    assert_eq!(data.instances.len(), 20);
    let mut optimal = 0;
    let mut above_optimum = true;
    let mut fixed_points = 0;
    let mut runs = 0;
    for (i, points) in data.instances.iter().enumerate() {
        assert!(points.len() <= 10);
        let spec = ClusterSpec::kmeans(data.k, 100 + i as u64);
        let best = kmeans_restarts(points, &spec, KMEANS_RESTARTS).unwrap();
        let opt = brute_force_two_means(points);
        if (best.inertia - opt).abs() <= KMEANS_OPT_TOL * (1.0 + opt) {
            optimal += 1;
        } else {
            say(&format!("  instance {i}: k-means {} vs optimum {opt}", best.inertia));
        }
        for r in 0..KMEANS_RESTARTS as u64 {
            let m = kmeans_fit(points, &ClusterSpec { seed: spec.seed + r, ..spec.clone() }).unwrap();
            runs += 1;
            above_optimum &= m.inertia >= opt - KMEANS_OPT_TOL * (1.0 + opt);
            if lloyd_fixed_point(points, &m.centers, &m.assignments, m.inertia, &m.inertia_history) {
                fixed_points += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = optimal == 20 && fixed_points == runs && secs < 10.0;
    report(
        "kmeans_oracle",
        pass,
        &format!(
            "{optimal}/20 instances at the enumerated optimum after {KMEANS_RESTARTS} restarts, \
             {fixed_points}/{runs} runs at a Lloyd fixed point, no run below the optimum: {above_optimum}, {secs:.2}s"
        ),
    );
    // misses are local optima of Lloyd's map, reported above; the fixed-point and
    // lower-bound properties must hold on every run
    assert!(fixed_points == runs && above_optimum);
}

// ---------------------------------------------------------------- RoI Align

/// Bilinear read of one channel with the border rules: points more than one cell
/// outside contribute zero, points in the border band snap onto the edge.
fn bilinear(plane: &[f64], h: usize, w: usize, mut y: f64, mut x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    (1.0 - ly) * (1.0 - lx) * at(y0, x0) + (1.0 - ly) * lx * at(y0, x1) + ly * (1.0 - lx) * at(y1, x0) + ly * lx * at(y1, x1)
}

fn roi_oracle(map: &[f64], c: usize, h: usize, w: usize, stride: f64, b: &BBox, out: usize) -> Vec<f64> {
    let (x1, y1) = (b.x1 / stride, b.y1 / stride);
    let bw = (b.x2 / stride - x1) / out as f64;
    let bh = (b.y2 / stride - y1) / out as f64;
    let mut v = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = &map[ch * h * w..(ch + 1) * h * w];
        for py in 0..out {
            for px in 0..out {
                let mut acc = 0.0;
                for sy in [0.25, 0.75] {
                    for sx in [0.25, 0.75] {
                        acc += bilinear(plane, h, w, y1 + (py as f64 + sy) * bh, x1 + (px as f64 + sx) * bw);
                    }
                }
                v.push(acc / 4.0);
            }
        }
    }
    v
}

#[test]
fn roi_align_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    for _ in 0..ROI_PAIRS {
        let (c, h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=12), rng.gen_range(1..=12));
        let stride = *[1usize, 4, 8].get(rng.gen_range(0..3)).unwrap();
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let map = FeatureMap {
            tensor: Tensor::from_vec(&[c, h, w], data.clone()).unwrap(),
            stride,
        };
        let (iw, ih) = ((w * stride) as f64, (h * stride) as f64);
        let x1 = rng.gen_range(-0.3 * iw..1.1 * iw);
        let y1 = rng.gen_range(-0.3 * ih..1.1 * ih);
        let b = bx(x1, y1, x1 + rng.gen_range(0.1..iw), y1 + rng.gen_range(0.1..ih));
        let out = rng.gen_range(1..=4);
        let got = roi_align(&map, &b, out).unwrap();
        let want = roi_oracle(&data, c, h, w, stride as f64, &b, out);
        assert_eq!(got.values.len(), want.len());
        for (g, e) in got.values.iter().zip(&want) {
            worst = worst.max((g - e).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= ROI_TOL && secs < 30.0;
    report("roi_align_oracle", pass, &format!("max abs diff {worst:.2e} over {ROI_PAIRS} random pairs, {secs:.2}s"));
    assert!(pass);
}

// ---------------------------------------------------------------- metrics

fn det(items: &[(BBox, f64)]) -> DetectionResult {
    DetectionResult::new(items.iter().map(|i| i.0).collect(), items.iter().map(|i| i.1).collect()).unwrap()
}

#[test]
fn metrics_oracle() {
    let gt = bx(0.0, 0.0, 10.0, 10.0);
    let thresholds = coco_iou_thresholds();
    let ap = |preds: DetectionResult| average_precision(&[preds], &[vec![gt]], &thresholds, 0.5).unwrap();

    let perfect = ap(det(&[(gt, 0.9)]));
    let duplicate = ap(det(&[(gt, 0.9), (bx(0.0, 0.0, 10.0, 10.0), 0.8)]));
    // IoU exactly 0.6
    let partial = ap(det(&[(bx(0.0, 0.0, 10.0, 6.0), 0.9)]));
    let ap50_ok = [&perfect, &duplicate, &partial].iter().all(|m| m.ap50 == 1.0);
    let ap75_ok = perfect.ap75 == 1.0 && duplicate.ap75 == 1.0 && partial.ap75 == 0.0;
    let coco_ok = (partial.ap - 0.3).abs() < 1e-12 && perfect.ap == 1.0;

    // every confusion count up to 6 of each kind, realised as actual boxes
    let mut prf_ok = true;
    let mut cases = 0;
    for tp in 0..=6usize {
        for fp in 0..=6usize {
            for fn_ in 0..=6usize {
                let gts: Vec<BBox> = (0..tp + fn_).map(|i| bx(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0)).collect();
                let mut items: Vec<(BBox, f64)> = gts[..tp].iter().map(|g| (*g, 0.9)).collect();
                items.extend((0..fp).map(|i| (bx(20.0 * i as f64, 100.0, 20.0 * i as f64 + 10.0, 110.0), 0.5)));
                let counts = match_predictions(&det(&items), &gts, 0.5);
                let (p, r, f1) = precision_recall_f1(counts.tp, counts.fp, counts.fn_);
                let ep = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let er = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                let ef = if ep + er == 0.0 { 0.0 } else { 2.0 * ep * er / (ep + er) };
                prf_ok &= (counts.tp, counts.fp, counts.fn_) == (tp, fp, fn_);
                prf_ok &= (p - ep).abs() < 1e-12 && (r - er).abs() < 1e-12 && (f1 - ef).abs() < 1e-12;
                cases += 1;
            }
        }
    }
    let pass = ap50_ok && ap75_ok && coco_ok && prf_ok;
    report(
        "metrics_oracle",
        pass,
        &format!(
            "AP50 = {}/{}/{}, AP75 = {}/{}/{}, partial-overlap AP = {:.3}, {cases} confusion counts {}",
            perfect.ap50,
            duplicate.ap50,
            partial.ap50,
            perfect.ap75,
            duplicate.ap75,
            partial.ap75,
            partial.ap,
            if prf_ok { "match" } else { "MISMATCH" }
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- separation experiment

struct Outcome {
    probe: f64,
    ap50: f64,
    secs: f64,
    first_loss: f64,
    last_loss: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn probe_accuracy(params: &ExtractorParams, test: &[ImageSample]) -> f64 {
    let feats = collect_features(params, test, &FeatureSelection::default()).unwrap();
    let rows = |r: &[Vec<_>]| -> Vec<(Vec<f64>, bool)> {
        r.iter()
            .flatten()
            .map(|(role, v): &(FeatureRole, clusterdet::roipool::FeatureVector)| (v.values.clone(), *role == FeatureRole::Sample))
            .collect()
    };
    let half = test.len() / 2;
    // a dead network can leave one class empty; that probe scores chance
    linear_probe(&rows(&feats[..half]), &rows(&feats[half..])).map_or(0.5, |p| p.test_accuracy)
}

fn run_arm(seed: u64, l1: f64, train_set: &[ImageSample], test: &[ImageSample], fonts: &[ImageSample]) -> Outcome {
    let cfg = TrainConfig {
        seed,
        lambdas: [l1, 1.0, 1.0],
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let run = train(&cfg, train_set, fonts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(run.failure.is_none(), "{:?}", run.failure);
    let ap50 = evaluate(&run.params, test, &Detector::default(), 0.5).unwrap().ap50;
    let totals: Vec<f64> = run.records.iter().map(|r| r.loss.total).collect();
    Outcome {
        probe: probe_accuracy(&run.params, test),
        ap50,
        secs,
        first_loss: mean(&totals[..10]),
        last_loss: mean(&totals[totals.len() - 10..]),
    }
}

#[test]
fn separation_experiment() {
    let start = Instant::now();
    let train_set = generate(Source::Rubbing, &GenSpec::default().with_seed(1), 200).unwrap();
    let test_set = generate(Source::Rubbing, &GenSpec::default().with_seed(2), 50).unwrap();
    let fonts = generate(Source::FontLibrary, &GenSpec::font_default().with_seed(3), 50).unwrap();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3u64 {
        let a = run_arm(seed, 1.0, &train_set, &test_set, &fonts);
        let b = run_arm(seed, 0.0, &train_set, &test_set, &fonts);
        say(&format!(
            "  seed {seed}: contrastive probe {:.4} AP50 {:.4} loss {:.3}->{:.3} ({:.0}s) | detection-only probe {:.4} AP50 {:.4} loss {:.3}->{:.3} ({:.0}s)",
            a.probe, a.ap50, a.first_loss, a.last_loss, a.secs, b.probe, b.ap50, b.first_loss, b.last_loss, b.secs
        ));
        with.push(a);
        without.push(b);
    }
    let secs = start.elapsed().as_secs_f64();
    let gains: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a.probe - b.probe).collect();
    let median_gain = median(gains.clone());
    let ap_wins = with.iter().zip(&without).filter(|(a, b)| a.ap50 > b.ap50).count();
    let losses_fall = with.iter().chain(&without).all(|o| o.last_loss < o.first_loss);
    let pass = median_gain >= PROBE_GAIN && ap_wins >= 2;
    report(
        "separation_experiment",
        pass,
        &format!(
            "median probe gain {:+.2} pts (need >= {:+.0}), AP50 better on {ap_wins}/3 seeds (need 2), \
             training loss falls in every run: {losses_fall}, {secs:.0}s",
            100.0 * median_gain,
            100.0 * PROBE_GAIN
        ),
    );
    let ap: Vec<f64> = with.iter().map(|o| o.ap50).collect();
    let probe: Vec<f64> = with.iter().map(|o| o.probe).collect();
    let ap0: Vec<f64> = without.iter().map(|o| o.ap50).collect();
    let probe0: Vec<f64> = without.iter().map(|o| o.probe).collect();
    say(&format!(
        "[seed_spread] REPORT contrastive AP50 {:.4} +- {:.4}, probe {:.4} +- {:.4}; detection-only AP50 {:.4} +- {:.4}, probe {:.4} +- {:.4} (mean +- sd over 3 seeds)",
        mean(&ap),
        std_dev(&ap),
        mean(&probe),
        std_dev(&probe),
        mean(&ap0),
        std_dev(&ap0),
        mean(&probe0),
        std_dev(&probe0)
    ));
    // the direction of the effect is measured and reported above; only the runs'
    // soundness is enforced here
    assert!(with.iter().chain(&without).all(|o| o.ap50.is_finite() && (0.0..=1.0).contains(&o.probe)));
}

// ---------------------------------------------------------------- ablation

fn small_sets() -> (Vec<ImageSample>, Vec<ImageSample>) {
    let spec = GenSpec {
        image_size: 64,
        glyphs_per_image: (1, 2),
        ..GenSpec::default()
    };
    let rub = (0..4).map(|i| gen_rubbing(&spec, i).unwrap()).collect();
    let font = (0..6).map(|i| gen_font(&GenSpec::font_default(), i).unwrap()).collect();
    (rub, font)
}

fn log_bytes(records: &[clusterdet::trainer::IterationRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_log(&mut out, records).unwrap();
    out
}

#[test]
fn ablation_identities() {
    let (rub, font) = small_sets();
    let cfg = TrainConfig {
        iterations: 6,
        lambdas: [0.0, 1.0, 1.0],
        n_neg_clusters: 8,
        m_pos_clusters: 2,
        obc_count: 4,
        neg_per_image: 32,
        ..TrainConfig::default()
    };
    let full = train(&cfg, &rub, &font).unwrap();
    let stripped = train_with(&cfg, &rub, &[], Pipeline::DetectionOnly).unwrap();
    let identical = encode_checkpoint(&full.params) == encode_checkpoint(&stripped.params)
        && log_bytes(&full.records) == log_bytes(&stripped.records);

    // zeroing the font images leaves detection gradients exactly unchanged
    let cfg1 = TrainConfig {
        lambdas: [1.0, 1.0, 1.0],
        ..cfg.clone()
    };
    let params = ExtractorParams::init(3, 9);
    let refs: Vec<&ImageSample> = rub.iter().take(2).collect();
    let grads_for = |fonts: &[ImageSample]| {
        let frefs: Vec<&ImageSample> = fonts.iter().collect();
        let plan = plan_step(&cfg1, &refs, &frefs, 1, true).unwrap();
        let (centers, _) = step_centers(&params, &plan, &cfg1).unwrap();
        component_grads(&params, &plan, centers.as_ref(), &cfg1).unwrap()
    };
    let blank: Vec<ImageSample> = font
        .iter()
        .map(|s| ImageSample {
            image: GrayImage::filled(s.image.width, s.image.height, 0.0),
            ..s.clone()
        })
        .collect();
    let (det, clus) = grads_for(&font);
    let (det0, clus0) = grads_for(&blank);
    let isolated = det.to_flat() == det0.to_flat() && clus.to_flat() != clus0.to_flat();

    let pass = identical && isolated;
    report(
        "ablation_identities",
        pass,
        &format!("zero-weight run bit-identical to detection-only build: {identical}; font zeroing leaves detection gradients unchanged: {isolated}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- reproducibility

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_clusterdet")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (r, t, f) = (root.join("train"), root.join("test"), root.join("font"));
    let (ck, log, emb) = (root.join("model.bin"), root.join("log.csv"), root.join("embed.csv"));
    cli(&["gen", "--out", &s(&r), "--kind", "rubbing", "--count", "20", "--seed", "1"]);
    cli(&["gen", "--out", &s(&t), "--kind", "rubbing", "--count", "10", "--seed", "2"]);
    cli(&["gen", "--out", &s(&f), "--kind", "font", "--count", "20", "--seed", "3"]);
    let train_out = cli(&[
        "train", "--rubbing", &s(&r), "--font", &s(&f), "--out", &s(&ck), "--log", &s(&log), "--iterations", "20", "--seed", "4",
    ]);
    let metrics = cli(&["eval", "--ckpt", &s(&ck), "--data", &s(&t), "--score-thresh", "0"]);
    cli(&["embed", "--ckpt", &s(&ck), "--rubbing", &s(&t), "--font", &s(&f), "--out", &s(&emb)]);
    vec![
        ("checkpoint".into(), fs::read(&ck).unwrap()),
        ("log".into(), fs::read(&log).unwrap()),
        ("train stdout".into(), train_out),
        ("metrics".into(), metrics),
        ("embedding".into(), fs::read(&emb).unwrap()),
    ]
}

#[test]
fn reproducibility() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let pass = differing.is_empty();
    report(
        "reproducibility",
        pass,
        &format!(
            "two full pipeline runs: {} artifacts compared, differing: {:?} (3-seed spread in the separation_experiment report)",
            ra.len(),
            differing
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- temperature limit

#[test]
fn temperature_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut unit = |d: usize| {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let tau = Temperature::new(TAU_LIMIT).unwrap();
    let mut worst = 0.0f64;
    for n in [1usize, 5, 63] {
        for _ in 0..5 {
            let p = unit(1024);
            let pos = unit(1024);
            let negs: Vec<Vec<f64>> = (0..n).map(|_| unit(1024)).collect();
            let l = clus_loss_single(&p, &pos, &negs, tau, DenominatorMode::WithPositive);
            worst = worst.max((l - ((n + 1) as f64).ln()).abs());
        }
    }
    let pass = worst <= TAU_LIMIT_TOL;
    report("temperature_limit", pass, &format!("max |loss - ln(N+1)| = {worst:.2e} for N in {{1, 5, 63}}"));
    assert!(pass);
}
