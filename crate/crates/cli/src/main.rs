//! Command-line harness: train, eval, map-labels, sweep, export-prompt.
//!
//! Exit codes: 0 success, 2 usage (clap), 3 invalid config/geometry,
//! 4 dataset errors, 5 numeric aborts, 6 io/format errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pixelprompt::data::{CorruptionKind, CorruptionSpec};
use pixelprompt::error::Error;
use pixelprompt::optimizer::NormKind;
use pixelprompt::sweep::{run_sweep, SweepGrid};
use pixelprompt::train;
use pixelprompt::{Method, RunConfig, Schedule};

#[derive(Parser)]
#[command(name = "pixelprompt", version, about = "Pixel-border visual prompting on a frozen toy vision transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a prompt (or a baseline) from a config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Build the prediction-frequency label mapping and persist it
    MapLabels(MapLabelsArgs),
    /// Run an ablation grid and print the comparison table
    Sweep(SweepArgs),
    /// Export the clipped prompt visualization as a PNG
    ExportPrompt(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    L1,
    Linf,
    L2Partial,
    L2Whole,
}

impl From<NormArg> for NormKind {
    fn from(v: NormArg) -> Self {
        match v {
            NormArg::None => NormKind::None,
            NormArg::L1 => NormKind::L1,
            NormArg::Linf => NormKind::LInf,
            NormArg::L2Partial => NormKind::L2Partial,
            NormArg::L2Whole => NormKind::L2Whole,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    PixelPrompt,
    TokenPrompt,
    LinearProbe,
    ZeroShot,
}

impl From<MethodArg> for Method {
    fn from(v: MethodArg) -> Self {
        match v {
            MethodArg::PixelPrompt => Method::PixelPrompt,
            MethodArg::TokenPrompt => Method::TokenPrompt,
            MethodArg::LinearProbe => Method::LinearProbe,
            MethodArg::ZeroShot => Method::ZeroShot,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Constant,
    CosineDecay,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptionArg {
    GaussianNoise,
    Blur,
    Contrast,
}

impl From<CorruptionArg> for CorruptionKind {
    fn from(v: CorruptionArg) -> Self {
        match v {
            CorruptionArg::GaussianNoise => CorruptionKind::GaussianNoise,
            CorruptionArg::Blur => CorruptionKind::Blur,
            CorruptionArg::Contrast => CorruptionKind::Contrast,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    normalization: Option<NormArg>,
    #[arg(long)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    method: Option<MethodArg>,
    /// Shrunk-image side (the inner size of the prompt geometry)
    #[arg(long)]
    image_size: Option<usize>,
    /// Dataset root for folder / cifar sources
    #[arg(long)]
    dataset_path: Option<PathBuf>,
    /// Per-class training subset fraction in (0, 1]
    #[arg(long)]
    subset_fraction: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = self.normalization {
            cfg.optimizer.normalization = v.into();
        }
        if let Some(v) = self.schedule {
            cfg.optimizer.schedule = match v {
                ScheduleArg::Constant => Schedule::Constant,
                ScheduleArg::CosineDecay => Schedule::CosineDecay,
            };
        }
        if let Some(v) = self.method {
            cfg.method = v.into();
        }
        if let Some(v) = self.image_size {
            cfg.geometry.inner_size = v;
        }
        if let Some(v) = &self.dataset_path {
            cfg.dataset.path = Some(v.clone());
        }
        if let Some(v) = self.subset_fraction {
            cfg.dataset.subset_fraction = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional config supplying the dataset (defaults to the one recorded
    /// in the checkpoint)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which split to evaluate
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    corruption: Option<CorruptionArg>,
    #[arg(long, default_value_t = 1)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    corruption_seed: u64,
}

#[derive(Args)]
struct MapLabelsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Where to write the mapping table (defaults to <output-dir>/mapping.txt)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid to run: image-size, normalization, or augmentation
    #[arg(long)]
    grid: String,
    /// Comma-separated inner sizes for the image-size grid
    #[arg(long)]
    values: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidGeometry(_) | Error::ShapeMismatch(_) | Error::InvalidConfig(_) | Error::InvalidInput(_) => 3,
        Error::Dataset(_) => 4,
        Error::Numeric(_) => 5,
        Error::Format(_) | Error::Io(_) => 6,
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    args.overrides.apply(&mut cfg);
    let out = train::train(&cfg)?;
    for r in &out.metrics {
        print!("{}", format_record(r));
    }
    println!("run written to {}", out.output_dir.display());
    Ok(())
}

fn format_record(r: &train::MetricsRecord) -> String {
    format!(
        "epoch={} split={} loss={} top1={} prompt_params={}\n",
        r.epoch, r.split, r.loss, r.top1, r.prompt_params
    )
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let ckpt = train::load_checkpoint(&args.checkpoint)?;
    let dataset_spec = match &args.config {
        Some(p) => RunConfig::from_file(p)?.dataset,
        None => ckpt.manifest.run.dataset.clone(),
    };
    let split = dataset_spec.load(ckpt.manifest.run.backbone.native_size)?;
    let ds = match args.split.as_str() {
        "train" => &split.train,
        "eval" => &split.eval,
        other => return Err(Error::InvalidConfig(format!("unknown split {other}"))),
    };
    let corruption = args.corruption.map(|kind| CorruptionSpec {
        kind: kind.into(),
        severity: args.severity,
        seed: args.corruption_seed,
    });
    let result = train::evaluate_checkpoint(&ckpt, ds, corruption)?;
    println!("split={} loss={} top1={} n={}", args.split, result.loss, result.top1, result.n);
    Ok(())
}

fn cmd_map_labels(args: &MapLabelsArgs) -> Result<(), Error> {
    let cfg = RunConfig::from_file(&args.config)?;
    cfg.validate()?;
    let backbone = pixelprompt::FrozenBackbone::new(cfg.backbone.clone())?;
    let split = cfg.dataset.load(cfg.backbone.native_size)?;
    let mapping = pixelprompt::build_mapping(&backbone, &split.train, cfg.mapping.policy)?;
    let text = pixelprompt::label_mapping::mapping_to_string(&mapping);
    let out_path = match &args.out {
        Some(p) => p.clone(),
        None => {
            let dir = cfg.resolved_output_dir();
            std::fs::create_dir_all(&dir)?;
            dir.join(train::MAPPING_FILE)
        }
    };
    std::fs::write(&out_path, &text)?;
    print!("{text}");
    println!("mapping written to {}", out_path.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    args.overrides.apply(&mut cfg);
    let grid = match args.grid.as_str() {
        "image-size" => {
            let values = args
                .values
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("image-size sweep needs --values".into()))?;
            let sizes: Result<Vec<usize>, _> = values.split(',').map(|s| s.trim().parse::<usize>()).collect();
            SweepGrid::ImageSize(sizes.map_err(|e| Error::InvalidConfig(format!("bad --values: {e}")))?)
        }
        "normalization" => SweepGrid::Normalization,
        "augmentation" => SweepGrid::Augmentation,
        other => return Err(Error::InvalidConfig(format!("unknown grid {other}"))),
    };
    let table = run_sweep(&cfg, &grid)?;
    let rendered = table.render();
    print!("{rendered}");
    let outdir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&outdir)?;
    std::fs::write(outdir.join(format!("sweep_{}.txt", table.grid)), rendered)?;
    Ok(())
}

fn cmd_export_prompt(args: &ExportArgs) -> Result<(), Error> {
    let ckpt = train::load_checkpoint(&args.checkpoint)?;
    let spec = &ckpt.manifest.run.dataset;
    let channels = ckpt.prompt.geometry.channels;
    let (mean, std) = if spec.pixel_mean.len() >= channels {
        (spec.pixel_mean[..channels].to_vec(), spec.pixel_std[..channels].to_vec())
    } else {
        (vec![0.0; channels], vec![1.0; channels])
    };
    pixelprompt::geometry::write_prompt_png(&ckpt.prompt, &mean, &std, &args.out)?;
    println!("prompt visualization written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::MapLabels(args) => cmd_map_labels(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::ExportPrompt(args) => cmd_export_prompt(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
