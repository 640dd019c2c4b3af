use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;
use wr_cli::{router, Engine, Guidance, ServiceConfig};
use wr_core::joint_gan::{fit_joint, sample_grid, JointGanConfig, JointTrainer};
use wr_core::metrics::{evaluate_run, RunDirs};
use wr_core::objectives::{GanMode, VggConfig};
use wr_core::trainer::{fit, load_meta, TrainConfig, Trainer};
use wr_core::wireframe::toy::write_toy_dataset;
use wr_core::wireframe::{load_dataset_with, ColorHistogram, DatasetOptions, RasterImage, Split, Wireframe};

#[derive(Parser)]
#[command(name = "wr", version, about = "Wireframe-to-image rendering: training, evaluation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the renderer on a paired dataset.
    Train(TrainArgs),
    /// Score generated images against real ones.
    Evaluate(EvaluateArgs),
    /// Render one wireframe file with a trained checkpoint.
    Render(RenderArgs),
    /// Serve the /v1 HTTP API.
    Serve(ServeArgs),
    /// Load a dataset and report orphans or parse errors.
    DatasetCheck(DatasetCheckArgs),
    /// Write a synthetic dataset of flat-shaded rooms.
    MakeToy(MakeToyArgs),
    /// Train the joint noise-to-(wireframe, image) GAN.
    TrainJoint(TrainJointArgs),
    /// Draw samples from a joint GAN checkpoint.
    SampleJoint(SampleJointArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GanModeArg {
    Lsgan,
    Bce,
}

impl From<GanModeArg> for GanMode {
    fn from(m: GanModeArg) -> Self {
        match m {
            GanModeArg::Lsgan => GanMode::Lsgan,
            GanModeArg::Bce => GanMode::Bce,
        }
    }
}

/// Overrides for top-level training settings; nested ones come from
/// `--config`.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_rate: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    gan_mode: Option<GanModeArg>,
    /// Stroke width used when rasterizing wireframes.
    #[arg(long)]
    line_width: Option<f32>,
    /// Pretrained VGG16 safetensors for the perceptual loss.
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(lr, lr_decay_rate, lr_decay_every, beta1, beta2, batch_size, max_epochs, seed, checkpoint_every, validate_every, workers);
        if let Some(m) = self.gan_mode {
            c.gan_mode = m.into();
        }
        if let Some(w) = self.line_width {
            c.augment.line_width = w;
        }
        if let Some(p) = &self.vgg_weights {
            c.perceptual.weights = Some(p.clone());
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with images/, annotations/ and train.txt.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// TOML or JSON training config.
    #[arg(long, conflicts_with = "toy")]
    config: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from the narrow CPU smoke config.
    #[arg(long)]
    toy: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    real: PathBuf,
    /// Ground-truth wireframes for sAP.
    #[arg(long, requires = "detections")]
    annotations: Option<PathBuf>,
    /// Line detector output for sAP.
    #[arg(long, requires = "annotations")]
    detections: Option<PathBuf>,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained VGG16 safetensors; without it the trunk is random.
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
    /// Seed of the random trunk used when no weights are given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, env = "WR_CHECKPOINT")]
    checkpoint: PathBuf,
    /// Wireframe annotation JSON.
    #[arg(long)]
    wireframe: PathBuf,
    /// Image whose colour histogram guides the render.
    #[arg(long, conflicts_with = "histogram")]
    reference: Option<PathBuf>,
    /// Histogram JSON (256 rows of three fractions).
    #[arg(long)]
    histogram: Option<PathBuf>,
    /// Directory receiving scene.png and wireframe.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "WR_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 2)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 8 * 1024 * 1024)]
    max_body_bytes: usize,
}

#[derive(Args)]
struct DatasetCheckArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Check one split only.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    train: usize,
    #[arg(long, default_value_t = 8)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainJointArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Narrow networks for CPU smoke runs.
    #[arg(long)]
    toy: bool,
    #[arg(long, conflicts_with = "toy")]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Stop after this many steps even mid-epoch.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleJointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG grid: scenes on the top row, wireframes below.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Render(a) => render(a),
        Command::Serve(a) => serve(a),
        Command::DatasetCheck(a) => dataset_check(a),
        Command::MakeToy(a) => {
            write_toy_dataset(&a.out, a.train, a.test, a.size, a.seed)?;
            println!("wrote {} train and {} test samples to {}", a.train, a.test, a.out.display());
            Ok(())
        }
        Command::TrainJoint(a) => train_joint(a),
        Command::SampleJoint(a) => sample_joint(a),
    }
}

fn load_split(root: &Path, split: Split, line_width: f32, workers: usize) -> Result<Vec<wr_core::wireframe::PairedSample>> {
    let opts = DatasetOptions {
        line_width,
        workers: workers.max(1),
        ..Default::default()
    };
    load_dataset_with(root, split, &opts).with_context(|| format!("loading {split} split of {}", root.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.config, &a.resume) {
        (Some(p), _) => TrainConfig::from_file(p)?,
        (None, Some(r)) => load_meta(r)?.config,
        (None, None) if a.toy => TrainConfig::toy(),
        (None, None) => TrainConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;

    let train = load_split(&a.dataset, Split::Train, cfg.augment.line_width, cfg.workers)?;
    let test = if a.dataset.join(Split::Test.manifest_name()).is_file() {
        load_split(&a.dataset, Split::Test, cfg.augment.line_width, cfg.workers)?
    } else {
        Vec::new()
    };
    tracing::info!(train = train.len(), test = test.len(), "dataset loaded");

    let mut trainer = match &a.resume {
        Some(r) => Trainer::resume(r, Some(cfg))?,
        None => Trainer::new(cfg)?,
    };
    let summary = fit(&mut trainer, &train, &test, &a.out)?;
    println!(
        "trained {} epochs ({} steps); {} checkpoints in {}",
        summary.epochs,
        summary.steps,
        summary.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let vgg = VggConfig {
        weights: a.vgg_weights.clone(),
        seed: a.seed,
        ..Default::default()
    };
    if vgg.weights.is_none() {
        tracing::warn!("no --vgg-weights given; FID and perceptual scores use a random trunk");
    }
    let ext = vgg.build()?;
    let dirs = RunDirs {
        generated: a.generated,
        real: a.real,
        annotations: a.annotations,
        detections: a.detections,
    };
    let report = evaluate_run(&dirs, &ext)?;
    report.write(&a.out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn render(a: RenderArgs) -> Result<()> {
    let engine = Engine::load(&a.checkpoint)?;
    let wf = Wireframe::from_json(&read_file(&a.wireframe)?).with_context(|| format!("parsing {}", a.wireframe.display()))?;
    let guidance = if let Some(p) = &a.reference {
        Guidance::Reference(RasterImage::load(p)?)
    } else if let Some(p) = &a.histogram {
        let rows: Vec<[f64; 3]> =
            serde_json::from_slice(&read_file(p)?).with_context(|| format!("parsing {}", p.display()))?;
        Guidance::Histogram(ColorHistogram::from_rows(&rows).with_context(|| format!("validating {}", p.display()))?)
    } else {
        Guidance::None
    };
    let out = engine.render(&wf, &guidance)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    out.scene.save_png(&a.out.join("scene.png"))?;
    out.wireframe.save_png(&a.out.join("wireframe.png"))?;
    println!("wrote scene.png and wireframe.png to {}", a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let engine = Arc::new(Engine::load(&a.checkpoint)?);
    let cfg = ServiceConfig {
        max_body_bytes: a.max_body_bytes,
        max_in_flight: a.max_in_flight,
        timeout: Duration::from_secs(a.timeout_secs),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        tracing::info!(addr = %a.addr, version = %engine.model_version(), "serving /v1");
        axum::serve(listener, router(engine, cfg))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn dataset_check(a: DatasetCheckArgs) -> Result<()> {
    let splits = match a.split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Test],
    };
    let mut checked = 0;
    for split in splits {
        if a.split.is_none() && !a.dataset.join(split.manifest_name()).is_file() {
            continue;
        }
        let samples = load_split(&a.dataset, split, 2.0, 0)?;
        let segments: usize = samples.iter().map(|s| s.wireframe.segments().len()).sum();
        println!("{split}: {} samples, {segments} segments", samples.len());
        checked += 1;
    }
    if checked == 0 {
        bail!("{} has neither train.txt nor test.txt", a.dataset.display());
    }
    Ok(())
}

fn train_joint(a: TrainJointArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(r) => JointTrainer::resume(r)?,
        None => {
            let mut cfg = if a.toy { JointGanConfig::toy() } else { JointGanConfig::default() };
            if let Some(v) = a.max_epochs {
                cfg.max_epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.lr = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            JointTrainer::new(cfg)?
        }
    };
    let data = load_split(&a.dataset, Split::Train, 2.0, 0)?;
    let steps = fit_joint(&mut trainer, &data, &a.out, a.max_steps)?;
    println!("trained {steps} joint steps; checkpoints in {}", a.out.display());
    Ok(())
}

fn sample_joint(a: SampleJointArgs) -> Result<()> {
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let trainer = JointTrainer::resume(&a.checkpoint)?;
    let z = trainer.noise(a.count, a.seed)?;
    let outputs = trainer.model().generate(&z, false)?;
    let top = outputs.last().context("model has no scales")?;
    sample_grid(top)?.save_png(&a.out)?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}
