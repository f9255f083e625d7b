//! `lowdose` command-line tool.
//!
//! Flags override config-file values, which override built-in defaults.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lowdose::checkpoint::load_checkpoint;
use lowdose::config::RunConfig;
use lowdose::eval::{Annotation, Roi};
use lowdose::image::{load_image, save_image, ImageFormat};
use lowdose::network::{denoise_image, DenoiseOptions, OutputDomain, Tiling, DEFAULT_TILE, DEFAULT_TILE_OVERLAP};
use lowdose::noise::{estimate_gain, simulate_dose_reduction, to_photons, GainModel, InverseMode};
use lowdose::run::{run_evaluation, run_training, write_phantoms, write_report, FINAL_CHECKPOINT};
use lowdose::{Error, Image, Result};

#[derive(Parser)]
#[command(name = "lowdose", version, about = "Low-dose X-ray denoising toolkit")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated phantom dataset (train/val/test) as 16-bit PGM.
    Phantom(PhantomArgs),
    /// Estimate the detector gain from a flat region.
    GainEstimate(GainArgs),
    /// Simulate a reduced-dose acquisition of an image.
    Simulate(SimulateArgs),
    /// Train a denoiser, writing checkpoints and the loss history.
    Train(TrainArgs),
    /// Denoise an image with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare Noisy, Gaussian and the trained model on the test set.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML). Built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed [default: from config].
    #[arg(long)]
    seed: Option<u64>,
    /// Data directory [default: from config].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct GainArgs {
    /// Input image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Flat region as row,col,height,width [default: whole image].
    #[arg(long, value_parser = parse_roi)]
    roi: Option<Roi>,
    /// Input format [default: from extension].
    #[arg(long)]
    format: Option<ImageFormat>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dose factor in (0, 1].
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Detector gain (pixel value per photon).
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// [default: from config]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: from config]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: from config]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: from config]
    #[arg(long)]
    alpha: Option<f64>,
    /// [default: from config]
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Detector gain (pixel value per photon).
    #[arg(long, default_value_t = 1.0)]
    gain: f64,
    /// anscombe, counts or normalized.
    #[arg(long, default_value = "counts")]
    output_domain: OutputDomain,
    /// unbiased or algebraic.
    #[arg(long, default_value = "unbiased")]
    inverse: InverseMode,
    #[arg(long, default_value_t = DEFAULT_TILE)]
    tile: usize,
    #[arg(long, default_value_t = DEFAULT_TILE_OVERLAP)]
    overlap: usize,
    /// Process the whole image in one pass instead of tiles.
    #[arg(long)]
    whole: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Trained model [default: <checkpoint_dir>/final.ckpt when present].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Skip the trained model even when a checkpoint exists.
    #[arg(long)]
    no_model: bool,
    /// [default: from config]
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Report path; the CSV goes next to it [default: from config].
    #[arg(long)]
    report: Option<PathBuf>,
    /// External reference row, NAME:PSNR:SSIM:SIGMA (empty fields allowed).
    #[arg(long = "annotate", value_parser = parse_annotation)]
    annotations: Vec<Annotation>,
}

fn parse_roi(s: &str) -> std::result::Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad ROI value '{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [row, col, height, width] => Ok(Roi { row, col, height, width }),
        _ => Err("ROI must be row,col,height,width".into()),
    }
}

fn parse_annotation(s: &str) -> std::result::Result<Annotation, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 4 || parts[0].is_empty() {
        return Err("annotation must be NAME:PSNR:SSIM:SIGMA".into());
    }
    let num = |p: &str| -> std::result::Result<Option<f64>, String> {
        if p.is_empty() {
            Ok(None)
        } else {
            p.parse().map(Some).map_err(|e| format!("bad number '{p}': {e}"))
        }
    };
    Ok(Annotation {
        method: parts[0].to_string(),
        psnr_db: num(parts[1])?,
        ssim: num(parts[2])?,
        sigma_image: num(parts[3])?,
        note: String::new(),
    })
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    ImageFormat::from_path(path)
        .ok_or_else(|| Error::Contract(format!("cannot infer image format of {}", path.display())))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.data_dir {
        cfg.paths.data_dir = dir.clone();
    }
    Ok(cfg)
}

fn phantom(args: PhantomArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let written = write_phantoms(&cfg)?;
    println!("wrote {} phantoms to {}", written.len(), cfg.paths.data_dir.display());
    Ok(())
}

fn gain_estimate(args: GainArgs) -> Result<()> {
    let format = match args.format {
        Some(f) => f,
        None => format_of(&args.input)?,
    };
    let img = load_image(&args.input, format)?;
    let region = match args.roi {
        Some(r) => img.crop((r.row, r.col), r.height, r.width)?,
        None => img,
    };
    let samples: Vec<f64> = region.pixels().iter().copied().collect();
    let gain = estimate_gain(&samples)?;
    println!("k = {:.6} ± {:.6} (95%, n = {})", gain.k, gain.confidence_halfwidth, gain.estimation_pixels);
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let img = load_image(&args.input, format_of(&args.input)?)?;
    let gain = GainModel::known(args.gain)?;
    let noisy = simulate_dose_reduction(&to_photons(&img, &gain)?, args.alpha, args.seed)?
        .to_counts(&gain, img.bit_depth())?;
    save_image(&noisy, &args.out, format_of(&args.out)?)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = args.checkpoint_dir {
        cfg.paths.checkpoint_dir = v;
    }
    let out = run_training(&cfg, |r| {
        eprintln!(
            "epoch {:>4}  train {:.5} (mse {:.5}, 1-ssim {:.5})  val {:.5}  val psnr {:.3} dB  val ssim {:.4}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.train_mse,
            1.0 - r.train_ssim,
            r.val_loss,
            r.val_psnr,
            r.val_ssim,
            r.seconds
        );
    })?;
    println!("wrote {}", out.final_checkpoint.display());
    Ok(())
}

fn denoise(args: DenoiseArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let img: Image = load_image(&args.input, format_of(&args.input)?)?;
    let opts = DenoiseOptions {
        output_domain: args.output_domain,
        inverse: args.inverse,
        tiling: if args.whole {
            Tiling::Whole
        } else {
            Tiling::Tiled {
                tile: args.tile,
                overlap: args.overlap,
            }
        },
    };
    let out = denoise_image(&model, &img, &GainModel::known(args.gain)?, &opts)?;
    save_image(&out, &args.out, format_of(&args.out)?)?;
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.checkpoint_dir {
        cfg.paths.checkpoint_dir = v;
    }
    if let Some(v) = args.report {
        cfg.paths.report_path = v;
    }
    cfg.validate()?;
    let checkpoint = match args.checkpoint {
        Some(p) => Some(p),
        None => Some(cfg.paths.checkpoint_dir.join(FINAL_CHECKPOINT)).filter(|p| p.is_file()),
    };
    let model = match checkpoint.filter(|_| !args.no_model) {
        Some(p) => Some(load_checkpoint(&p)?.0),
        None => None,
    };
    let mut report = run_evaluation(&cfg, model.as_ref())?;
    report.annotations = args.annotations;
    let csv = write_report(&report, &cfg.paths.report_path)?;
    print!("{}", report.to_table());
    println!("wrote {} and {}", cfg.paths.report_path.display(), csv.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::GainEstimate(a) => gain_estimate(a),
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
