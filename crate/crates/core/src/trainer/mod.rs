//! Joint training loop: rubbing and font batches go through the same extractor, anchors
//! are matched, RoI features are clustered, and the weighted loss is minimized with SGD.

mod step;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterSpec;
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::geometry::MatchPolicy;
use crate::lossfns::{DenominatorMode, LossReport, Temperature};
use crate::netcore::{ExtractorParams, Sgd};
use crate::seeding::{stream, Domain};

pub use step::{
    component_grads, evaluate_step, plan_step, step_centers, Centers, FeatureCounts, FontPlan, RubbingPlan,
    StepEval, StepPlan,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weights of the contrastive, class and box terms.
    pub lambdas: [f64; 3],
    pub tau: Temperature,
    pub n_neg_clusters: usize,
    pub m_pos_clusters: usize,
    /// Font-library images drawn (with replacement) per iteration.
    pub obc_count: usize,
    pub match_policy: MatchPolicy,
    /// Clustering method and its settings; `k` is replaced by the negative/positive counts.
    pub cluster_method: ClusterSpec,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub normalize_features: bool,
    pub denominator_mode: DenominatorMode,
    pub anchor_sizes: Vec<usize>,
    /// Cap on negative anchors per rubbing image that enter clustering.
    pub neg_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lambdas: [1.0, 1.0, 1.0],
            tau: Temperature::new(0.1).expect("valid default"),
            n_neg_clusters: 63,
            m_pos_clusters: 3,
            obc_count: 20,
            match_policy: MatchPolicy::dense(),
            cluster_method: ClusterSpec::default(),
            batch_size: 2,
            iterations: 500,
            seed: 0,
            normalize_features: true,
            denominator_mode: DenominatorMode::WithPositive,
            anchor_sizes: vec![16, 24, 32],
            neg_per_image: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) {
            return Err(Error::input(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::input("weight_decay must be >= 0"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::input(format!("lambdas must be >= 0, got {:?}", self.lambdas)));
        }
        if self.n_neg_clusters == 0 || self.m_pos_clusters == 0 {
            return Err(Error::input("cluster counts must be >= 1"));
        }
        if self.contrastive() && self.obc_count < self.m_pos_clusters {
            return Err(Error::input(format!(
                "obc_count ({}) must be >= m_pos_clusters ({})",
                self.obc_count, self.m_pos_clusters
            )));
        }
        if self.batch_size == 0 || self.neg_per_image == 0 {
            return Err(Error::input("batch_size and neg_per_image must be >= 1"));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.contains(&0) {
            return Err(Error::input("anchor_sizes must be nonempty and positive"));
        }
        self.match_policy.validate()?;
        self.cluster_method.validate()
    }

    /// True when the contrastive term has nonzero weight.
    pub fn contrastive(&self) -> bool {
        self.lambdas[0] != 0.0
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::input(format!("train config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Whether the contrastive branch is compiled into the step at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pipeline {
    #[default]
    Full,
    DetectionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: LossReport,
    pub features: FeatureCountsRecord,
    pub neg_clusters: usize,
    pub pos_clusters: usize,
    pub clamped: bool,
    pub neg_inertia: f64,
    pub pos_inertia: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureCountsRecord {
    pub samples: usize,
    pub negatives: usize,
    pub positives: usize,
}

impl From<FeatureCounts> for FeatureCountsRecord {
    fn from(c: FeatureCounts) -> Self {
        FeatureCountsRecord {
            samples: c.samples,
            negatives: c.negatives,
            positives: c.positives,
        }
    }
}

pub const LOG_HEADER: &str = "iteration,total,l_clus,l_class,l_box,samples,negatives,positives,\
neg_clusters,pos_clusters,clamped,neg_inertia,pos_inertia,pos_anchors,neg_anchors";

impl IterationRecord {
    /// One CSV row matching [`LOG_HEADER`]. Wall time is left out so logs are byte-stable.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            l.total,
            l.l_clus,
            l.l_class,
            l.l_box,
            self.features.samples,
            self.features.negatives,
            self.features.positives,
            self.neg_clusters,
            self.pos_clusters,
            u8::from(self.clamped),
            self.neg_inertia,
            self.pos_inertia,
            l.counts.pos_anchors,
            l.counts.neg_anchors,
        )
    }
}

pub fn write_log<W: Write>(mut out: W, records: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn save_log(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_log(&mut buf, records).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Weights plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ExtractorParams,
    pub optimizer: Sgd,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            params: ExtractorParams::init(config.anchor_sizes.len(), config.seed),
            optimizer: Sgd::new(config.lr, config.momentum, config.weight_decay)?,
        })
    }
}

/// Runs one iteration and applies the update. On error the state is unchanged.
pub fn train_step(
    state: &mut TrainState,
    rubbing: &[&ImageSample],
    fonts: &[&ImageSample],
    config: &TrainConfig,
    iteration: u64,
    pipeline: Pipeline,
) -> Result<IterationRecord> {
    let start = Instant::now();
    let contrastive = pipeline == Pipeline::Full && config.contrastive();
    if contrastive && fonts.is_empty() {
        return Err(Error::input("contrastive training needs a nonempty font batch"));
    }
    let plan = plan_step(config, rubbing, fonts, iteration, contrastive)?;
    let out = step::run_step(&state.params, &plan, config)?;
    state.optimizer.step(&mut state.params, &out.eval.grads)?;
    let c = out.centers.as_ref();
    Ok(IterationRecord {
        iteration,
        loss: out.eval.report,
        features: out.features.into(),
        neg_clusters: c.map_or(0, |c| c.neg_clusters),
        pos_clusters: c.map_or(0, |c| c.pos_clusters),
        clamped: c.is_some_and(|c| c.clamped),
        neg_inertia: c.map_or(0.0, |c| c.neg_inertia),
        pos_inertia: c.map_or(0.0, |c| c.pos_inertia),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFailure {
    pub iteration: u64,
    pub last_good_iteration: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Weights after the last successful step.
    pub params: ExtractorParams,
    pub records: Vec<IterationRecord>,
    pub failure: Option<TrainFailure>,
}

/// Rubbing indices for iteration `t` (round robin over the dataset).
pub fn rubbing_batch(t: u64, batch_size: usize, len: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|b| ((t as usize).wrapping_mul(batch_size) + b) % len)
        .collect()
}

/// Font indices for iteration `t`, uniform with replacement.
pub fn font_batch(seed: u64, t: u64, count: usize, len: usize) -> Vec<usize> {
    let mut rng = stream(seed, Domain::Font, t);
    (0..count).map(|_| rng.gen_range(0..len)).collect()
}

pub fn train(config: &TrainConfig, rubbing: &[ImageSample], fonts: &[ImageSample]) -> Result<TrainRun> {
    train_with(config, rubbing, fonts, Pipeline::Full)
}

/// Iterations are numbered from 1. A numeric failure ends the run and is reported in
/// [`TrainRun::failure`]; invalid inputs are returned as errors.
pub fn train_with(
    config: &TrainConfig,
    rubbing: &[ImageSample],
    fonts: &[ImageSample],
    pipeline: Pipeline,
) -> Result<TrainRun> {
    config.validate()?;
    if rubbing.is_empty() {
        return Err(Error::input("rubbing dataset is empty"));
    }
    let contrastive = pipeline == Pipeline::Full && config.contrastive();
    if contrastive && fonts.is_empty() {
        return Err(Error::input("font dataset is empty but the contrastive weight is nonzero"));
    }
    for s in rubbing.iter().chain(if contrastive { fonts } else { &[] }) {
        s.validate()?;
    }
    let mut state = TrainState::new(config)?;
    let mut records = Vec::with_capacity(config.iterations);
    let mut failure = None;
    for t in 1..=config.iterations as u64 {
        let batch: Vec<&ImageSample> = rubbing_batch(t - 1, config.batch_size, rubbing.len())
            .into_iter()
            .map(|i| &rubbing[i])
            .collect();
        let font_refs: Vec<&ImageSample> = if contrastive {
            font_batch(config.seed, t, config.obc_count, fonts.len())
                .into_iter()
                .map(|i| &fonts[i])
                .collect()
        } else {
            Vec::new()
        };
        match train_step(&mut state, &batch, &font_refs, config, t, pipeline) {
            Ok(r) => records.push(r),
            Err(Error::Numeric(message)) => {
                failure = Some(TrainFailure {
                    iteration: t,
                    last_good_iteration: records.last().map(|r: &IterationRecord| r.iteration),
                    message,
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun {
        params: state.params,
        records,
        failure,
    })
}
