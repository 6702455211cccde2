//! Commands behind the `ian` binary.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ian_core::checkpoint::Checkpoint;
use ian_core::data::{self, Dataset, DatasetSpec};
use ian_core::ian::{fit, FitOptions, IanModel, LossWeights, MdcMode, ModelConfig, TrainConfig, Trainer};
use ian_core::imaging;
use ian_core::metrics::{self, AblationBudget, ClassifierConfig, EvalClassifier};
use ian_core::optim::AdamConfig;
use ian_core::{Tensor, Tensor32};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "ian", version, about = "Introspective adversarial networks and latent-space photo editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint plus a JSONL loss log
    Train(TrainArgs),
    /// Draw random samples into a square PNG grid
    Sample(SampleArgs),
    /// Encode and regenerate images, written as original/reconstruction pairs
    Reconstruct(ReconstructArgs),
    /// Linear latent interpolation between two images as a PNG strip
    Interpolate(InterpolateArgs),
    /// Factorial ablation over MDC, orthogonal regularization and the ternary loss
    Ablate(AblateArgs),
    /// Run the editing service
    Serve(ServeArgs),
    /// Write the procedural shapes dataset as class-labelled PNGs
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mdc {
    Standard,
    Full,
    Off,
}

impl From<Mdc> for MdcMode {
    fn from(m: Mdc) -> Self {
        match m {
            Mdc::Standard => MdcMode::Standard,
            Mdc::Full => MdcMode::Full,
            Mdc::Off => MdcMode::Off,
        }
    }
}

/// Where training images come from.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Directory of PNG/JPEG images; first-level subdirectories are class labels
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use N procedurally generated shape images instead of a directory
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64, value_parser = parse_size)]
    pub size: usize,
    #[arg(long, default_value_t = 100)]
    pub latent_dim: usize,
    #[arg(long, value_enum, default_value_t = Mdc::Standard)]
    pub mdc: Mdc,
    /// Generator channels at its last hidden stage
    #[arg(long, default_value_t = 32)]
    pub g_width: usize,
    /// Discriminator channels at its first layer
    #[arg(long, default_value_t = 32)]
    pub d_width: usize,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.size, self.latent_dim);
        c.mdc = self.mdc.into();
        c.g_width = self.g_width;
        c.d_width = self.d_width;
        c
    }
}

fn parse_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (32 | 64)) => Ok(v),
        _ => Err(format!("size must be 32 or 64, got {s}")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 3.0)]
    pub lambda_img: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_feature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_adv: f64,
    /// Orthogonal regularization coefficient; 0 disables
    #[arg(long, default_value_t = 1e-4)]
    pub ortho: f64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub ternary: Switch,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL loss log; defaults to the checkpoint path with a .jsonl extension
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Continue from the checkpoint at --out, keeping its model and training settings
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total steps
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Squash instead of center-cropping non-square images
    #[arg(long)]
    pub no_crop: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub source: Source,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Images held out for reconstruction metrics
    #[arg(long, default_value_t = 500)]
    pub held_out: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    /// Coefficient used by configurations with orthogonal regularization on
    #[arg(long, default_value_t = 1e-4)]
    pub ortho: f64,
    #[arg(long, default_value_t = 5)]
    pub classifier_epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for ablation.csv and ablation.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Checkpoint to serve; without one every request answers 503
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = ian_service::DEFAULT_CAPACITY)]
    pub capacity: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 32, value_parser = parse_size)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Reconstruct(a) => reconstruct(&a),
        Command::Interpolate(a) => interpolate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Serve(a) => serve(&a),
        Command::Synth(a) => synth(&a),
    }
}

pub fn load_source(source: &Source, size: usize, seed: u64, center_crop: bool) -> Result<Dataset<f32>> {
    if let Some(n) = source.synthetic {
        return Ok(data::synthetic_shapes(n, size, seed));
    }
    let root = source.data.clone().context("no data source")?;
    let spec = DatasetSpec {
        root: root.clone(),
        size: size as u32,
        center_crop,
    };
    data::load_dir(&spec).with_context(|| format!("loading images from {}", root.display()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&a.out).with_context(|| format!("resuming from {}", a.out.display()))?;
        let t: Trainer<f32> = ckpt.trainer()?;
        log::info!("resuming at step {}", t.step);
        t
    } else {
        let config = a.model.config();
        config.validate()?;
        let model = IanModel::new(config, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
        Trainer::new(
            model,
            TrainConfig {
                weights: LossWeights {
                    adv: a.lambda_adv,
                    img: a.lambda_img,
                    feature: a.lambda_feature,
                },
                ortho: a.ortho,
                ternary: a.ternary == Switch::On,
                adam: AdamConfig {
                    lr: a.lr,
                    ..AdamConfig::default()
                },
                seed: a.seed,
                ..TrainConfig::default()
            },
        )
    };
    let size = trainer.model.config.image_size;
    let data = load_source(&a.source, size, trainer.config.seed, !a.no_crop)?;
    log::info!("{} images at {size}×{size}", data.len());

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&log_path)
        .with_context(|| format!("opening log {}", log_path.display()))?;
    let mut log = BufWriter::new(file);

    let mut opts = FitOptions::new(a.epochs, a.batch);
    opts.checkpoint_path = Some(a.out.clone());
    opts.checkpoint_every = a.checkpoint_every;
    opts.stop_after = a.max_steps;
    let every = (data.len() / a.batch.max(1)).max(1) as u64;
    fit(&mut trainer, &data.images, &opts, |r| {
        writeln!(log, "{}", r.to_json_line())?;
        if r.step % every == 0 {
            log::info!("step {} L_img {:.4} L_Dadv {:.4} L_Gadv {:.4}", r.step, r.l_img, r.l_dadv, r.l_gadv);
        }
        Ok(())
    })?;
    log.flush()?;
    log::info!("wrote {} after {} steps", a.out.display(), trainer.step);
    Ok(())
}

pub fn load_model(path: &Path) -> Result<IanModel<f32>> {
    Checkpoint::load(path)
        .and_then(|c| c.model())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn to_rgb(model_space: &Tensor32) -> Result<Vec<RgbImage>> {
    let n = model_space.shape()[0];
    (0..n)
        .map(|i| Ok(imaging::unit_to_rgb(&imaging::to_unit(&model_space.slice_rows(i, i + 1)?))?))
        .collect()
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Model-space `[N,3,S,S]` from image files.
pub fn load_images(paths: &[PathBuf], size: usize) -> Result<Tensor32> {
    let parts = paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let img = imaging::decode(&bytes).with_context(|| format!("decoding {}", p.display()))?;
            let unit: Tensor32 = imaging::rgb_to_unit(&imaging::prepare(&img, size as u32, true));
            Ok(imaging::to_model(&unit).reshape([1, 3, size, size])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?)
}

/// `n` samples arranged in a ⌈√n⌉ × ⌈√n⌉ grid.
pub fn sample_grid(model: &IanModel<f32>, n: usize, seed: u64) -> Result<RgbImage> {
    ensure!(n > 0, "need at least one sample");
    let images = to_rgb(&metrics::sample(model, n, seed)?)?;
    let side = imaging::grid_side(n);
    Ok(imaging::grid(&images, side, side)?)
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    save_png(&sample_grid(&model, a.n, a.seed)?, &a.out)
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let x = load_images(&a.images, model.config.image_size)?;
    let recon = metrics::reconstruct(&model, &x)?;
    let mut cells = Vec::new();
    for (orig, rec) in to_rgb(&x)?.into_iter().zip(to_rgb(&recon)?) {
        cells.push(orig);
        cells.push(rec);
    }
    save_png(&imaging::grid(&cells, 2, a.images.len())?, &a.out)
}

/// Generator outputs along `(1-t)·μ_A + t·μ_B` for `steps` evenly spaced `t ∈ [0, 1]`.
pub fn interpolation(model: &IanModel<f32>, a: &Tensor32, b: &Tensor32, steps: usize) -> Result<Tensor32> {
    ensure!(steps >= 2, "interpolation needs at least 2 steps");
    let za = model.encode(a)?.mu;
    let zb = model.encode(b)?.mu;
    let d = model.config.latent_dim;
    let mut z = Vec::with_capacity(steps * d);
    for i in 0..steps {
        let t = i as f32 / (steps - 1) as f32;
        z.extend(za.data().iter().zip(zb.data()).map(|(&p, &q)| (1.0 - t) * p + t * q));
    }
    Ok(model.generate(&Tensor::new([steps, d], z)?)?)
}

pub fn interpolate(a: &InterpolateArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let size = model.config.image_size;
    let xa = load_images(std::slice::from_ref(&a.a), size)?;
    let xb = load_images(std::slice::from_ref(&a.b), size)?;
    let strip = to_rgb(&interpolation(&model, &xa, &xb, a.steps)?)?;
    save_png(&imaging::grid(&strip, a.steps, 1)?, &a.out)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let data = load_source(&a.source, a.model.size, a.seed, true)?;
    let labels = data
        .labels
        .clone()
        .context("ablation needs class labels (class subdirectories or --synthetic)")?;
    ensure!(a.held_out < data.len(), "held-out count must be below the dataset size");
    let (held, train) = data.split(a.held_out)?;
    let train_labels = &labels[a.held_out..];

    let mut clf = EvalClassifier::new(ClassifierConfig::new(a.model.size, data.classes.len()), &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let loss = clf.train(&train.images, train_labels, a.classifier_epochs, a.batch, a.seed)?;
    let acc = clf.accuracy(&held.images, &labels[..a.held_out])?;
    log::info!("evaluation classifier: loss {loss:.4}, held-out accuracy {acc:.3}");

    let budget = AblationBudget {
        model: a.model.config(),
        train: TrainConfig::default(),
        ortho_coefficient: a.ortho,
        epochs: a.epochs,
        batch: a.batch,
        samples: a.samples,
        splits: a.splits,
        seed: a.seed,
    };
    let report = metrics::run_ablation(&metrics::factorial(), &train.images, &held.images, &clf, &budget)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablation.csv"), report.to_csv()?)?;
    fs::write(a.out.join("ablation.json"), report.to_json()?)?;
    for row in &report.rows {
        log::info!("{row:?}");
    }
    if report.rows.iter().all(|r| r.error.is_some()) {
        bail!("every ablation configuration failed");
    }
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let model = a.ckpt.as_deref().map(load_model).transpose()?;
    if model.is_none() {
        log::warn!("no checkpoint given; requests will answer 503");
    }
    let ip = a.host.parse().with_context(|| format!("bad host {}", a.host))?;
    let addr = SocketAddr::new(ip, a.port);
    let state = ian_service::AppState::new(model, a.capacity);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ian_service::serve(state, addr))?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let data: Dataset<f32> = data::synthetic_shapes(a.n, a.size, a.seed);
    data::write_png_dir(&data, &a.out)?;
    log::info!("wrote {} images to {}", a.n, a.out.display());
    Ok(())
}
