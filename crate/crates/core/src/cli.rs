//! Command-line front end: dataset generation, training, evaluation, embedding export
//! and offline clustering of feature dumps.
//!
//! Results go to stdout as JSON, diagnostics to stderr. Exit codes: 0 success,
//! 1 bad input, 2 numeric failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::clustering::{fit, ClusterReport, ClusterSpec};
use crate::dataset::{generate, load_dataset, save_dataset, GenSpec, ImageSample, Source};
use crate::error::{Error, Result};
use crate::evalkit::{collect_features, embed_2d, evaluate, save_embedding_csv, Detector, FeatureSelection};
use crate::lossfns::Temperature;
use crate::netcore::{load_checkpoint, save_checkpoint};
use crate::roipool::{load_feature_csv, save_feature_csv};
use crate::trainer::{save_log, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "clusterdet", version, about = "Tiny single-class detector with clustering-guided contrastive features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (PGM images + annotations.json).
    Gen(GenArgs),
    /// Train a detector and write its checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated dataset; prints metrics JSON.
    Eval(EvalArgs),
    /// Export a 2-D PCA embedding of RoI features.
    Embed(EmbedArgs),
    /// Cluster a feature CSV and write a JSON report.
    Cluster(ClusterArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Rubbing,
    Font,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Image side in pixels, a multiple of 8 [default: 128 rubbing, 64 font].
    #[arg(long)]
    pub size: Option<usize>,
    /// Salt-and-pepper density [default: 0.02 rubbing, 0 font].
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rubbing: PathBuf,
    #[arg(long)]
    pub font: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Overrides the learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Overrides the loss weights, as `contrastive,class,box`.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub score_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms: f64,
    /// Score cut for the reported precision/recall/F1.
    #[arg(long, default_value_t = 0.5)]
    pub f1_thresh: f64,
    #[arg(long, default_value_t = 100)]
    pub max_detections: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,24,32")]
    pub anchor_sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub rubbing: PathBuf,
    #[arg(long)]
    pub font: PathBuf,
    /// Embedding CSV (`role,x,y`).
    #[arg(long)]
    pub out: PathBuf,
    /// Also dump the raw feature vectors here, in the format `cluster` reads.
    #[arg(long)]
    pub features_out: Option<PathBuf>,
    /// Negative anchors sampled per rubbing image.
    #[arg(long, default_value_t = 32)]
    pub neg_per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "16,24,32")]
    pub anchor_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Kmeans,
    Dbscan,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Feature CSV (`role,f0,..`).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 12.0)]
    pub eps: f64,
    #[arg(long, default_value_t = 5)]
    pub min_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout, stderr),
        Command::Eval(a) => cmd_eval(&a, stdout),
        Command::Embed(a) => cmd_embed(&a, stdout),
        Command::Cluster(a) => cmd_cluster(&a, stdout),
    }
}

fn emit<T: Serialize>(stdout: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).expect("report serializes");
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn load_kind(dir: &Path, want: Source) -> Result<Vec<ImageSample>> {
    let samples = load_dataset(dir)?;
    if let Some(s) = samples.iter().find(|s| s.source != want) {
        return Err(Error::input(format!(
            "{} holds {:?} images, expected {:?}",
            dir.display(),
            s.source,
            want
        )));
    }
    Ok(samples)
}

#[derive(Serialize)]
struct GenSummary<'a> {
    out: &'a Path,
    count: usize,
    boxes: usize,
}

fn cmd_gen(a: &GenArgs, stdout: &mut dyn Write) -> Result<()> {
    let (kind, mut spec) = match a.kind {
        Kind::Rubbing => (Source::Rubbing, GenSpec::default()),
        Kind::Font => (Source::FontLibrary, GenSpec::font_default()),
    };
    spec.seed = a.seed;
    if let Some(s) = a.size {
        spec.image_size = s;
    }
    if let Some(n) = a.noise {
        spec.noise_density = n;
    }
    spec.validate()?;
    let samples = generate(kind, &spec, a.count)?;
    save_dataset(&samples, &a.out)?;
    emit(
        stdout,
        &GenSummary {
            out: &a.out,
            count: samples.len(),
            boxes: samples.iter().map(|s| s.boxes.len()).sum(),
        },
    )
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    if let Some(lr) = a.lr {
        config.lr = lr;
    }
    if let Some(t) = a.tau {
        config.tau = Temperature::new(t)?;
    }
    if let Some(l) = &a.lambdas {
        config.lambdas = l
            .as_slice()
            .try_into()
            .map_err(|_| Error::input(format!("--lambdas takes 3 values, got {}", l.len())))?;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    final_loss: Option<f64>,
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let config = resolve_config(a)?;
    writeln!(stdout, "{}", config.to_json()).map_err(|e| Error::io("<stdout>", e))?;
    let rubbing = load_kind(&a.rubbing, Source::Rubbing)?;
    let fonts = load_kind(&a.font, Source::FontLibrary)?;
    let run = train(&config, &rubbing, &fonts)?;
    if let Some(log) = &a.log {
        save_log(log, &run.records)?;
    }
    if let Some(f) = run.failure {
        let last = f.last_good_iteration.map_or("none".to_string(), |i| i.to_string());
        let _ = writeln!(stderr, "training stopped at iteration {}; last good iteration {last}", f.iteration);
        return Err(Error::Numeric(f.message));
    }
    save_checkpoint(&run.params, &a.out)?;
    emit(
        stdout,
        &TrainSummary {
            iterations: run.records.len(),
            final_loss: run.records.last().map(|r| r.loss.total),
        },
    )
}

fn cmd_eval(a: &EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let params = load_checkpoint(&a.ckpt)?;
    let data = load_kind(&a.data, Source::Rubbing)?;
    let detector = Detector {
        anchor_sizes: a.anchor_sizes.clone(),
        score_thresh: a.score_thresh,
        nms_thresh: a.nms,
        max_detections: a.max_detections,
    };
    if !(0.0..=1.0).contains(&a.score_thresh) || !(0.0..=1.0).contains(&a.nms) {
        return Err(Error::input("score and NMS thresholds must lie in [0, 1]"));
    }
    let report = evaluate(&params, &data, &detector, a.f1_thresh)?;
    emit(stdout, &report)
}

#[derive(Serialize)]
struct EmbedSummary {
    rows: usize,
    sample: usize,
    positive: usize,
    negative: usize,
    variances: [f64; 2],
}

fn cmd_embed(a: &EmbedArgs, stdout: &mut dyn Write) -> Result<()> {
    use crate::roipool::FeatureRole;

    let params = load_checkpoint(&a.ckpt)?;
    let mut images = load_kind(&a.rubbing, Source::Rubbing)?;
    images.extend(load_kind(&a.font, Source::FontLibrary)?);
    let sel = FeatureSelection {
        anchor_sizes: a.anchor_sizes.clone(),
        neg_per_image: a.neg_per_image,
        seed: a.seed,
        ..FeatureSelection::default()
    };
    let features: Vec<_> = collect_features(&params, &images, &sel)?.into_iter().flatten().collect();
    if features.is_empty() {
        return Err(Error::input("no features to embed"));
    }
    if let Some(p) = &a.features_out {
        save_feature_csv(p, &features)?;
    }
    let emb = embed_2d(&features)?;
    save_embedding_csv(&a.out, &emb.points)?;
    let count = |r: FeatureRole| features.iter().filter(|f| f.0 == r).count();
    emit(
        stdout,
        &EmbedSummary {
            rows: emb.points.len(),
            sample: count(FeatureRole::Sample),
            positive: count(FeatureRole::Positive),
            negative: count(FeatureRole::Negative),
            variances: emb.variances,
        },
    )
}

fn cmd_cluster(a: &ClusterArgs, stdout: &mut dyn Write) -> Result<()> {
    let rows = load_feature_csv(&a.features)?;
    if rows.is_empty() {
        return Err(Error::input(format!("{} holds no feature rows", a.features.display())));
    }
    let points: Vec<Vec<f64>> = rows.into_iter().map(|(_, v)| v.values).collect();
    let spec = match a.method {
        Method::Kmeans => ClusterSpec::kmeans(a.k, a.seed),
        Method::Dbscan => ClusterSpec {
            seed: a.seed,
            ..ClusterSpec::dbscan(a.eps, a.min_samples)
        },
    };
    let model = fit(&points, &spec)?;
    let report = ClusterReport::new(&spec, &model);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;
    emit(stdout, &report)
}
