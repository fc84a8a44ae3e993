//! Command-line interface: train, infer, eval-lpips, gen-data, warp-demo.
//!
//! Exit codes: 0 success, 1 contract violation, 2 I/O or format error,
//! 3 training divergence.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use tryon_core::image::{checkerboard, Image, Mask};
use tryon_core::lpips::{lpips_directory, LpipsWeights};
use tryon_core::objectives::PerceptualExtractor;
use tryon_core::pipeline::{load_model, Checkpoint, TrainConfig, Trainer};
use tryon_core::synth::{self, MaskMode, MaskSpec, SynthOptions};
use tryon_core::tps::{self, TpsTheta};
use tryon_core::{Error, PadMode};

#[derive(Parser)]
#[command(name = "tryon", about = "Warping U-net virtual try-on pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, checkpointing periodically.
    Train(TrainArgs),
    /// Fit a cloth image on a masked person image using a checkpoint.
    Infer(InferArgs),
    /// Perceptual-metric report over two directories of paired images.
    EvalLpips(EvalArgs),
    /// Export a synthetic dataset in the manifest layout.
    GenData(GenDataArgs),
    /// Render a checkerboard under a TPS transform.
    WarpDemo(WarpDemoArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (key = value lines). Omit for defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the fully documented default config to a path and exit.
    #[arg(long)]
    dump_config: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Drop the adversarial term entirely.
    #[arg(long)]
    no_adv: bool,
    /// Adversarial loss on the paired synthesis instead of the unpaired pass.
    #[arg(long)]
    paired_adv: bool,
    /// Stop image-loss gradients at the matcher; keep only the warp loss.
    #[arg(long)]
    no_e2e_warp: bool,
    /// Rectangular box masks instead of region masks.
    #[arg(long)]
    box_mask: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Person image (PNG).
    #[arg(long)]
    person: PathBuf,
    /// Binary mask of the region to replace (PNG, white = masked).
    #[arg(long)]
    mask: PathBuf,
    /// In-shop cloth image (PNG).
    #[arg(long)]
    cloth: PathBuf,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dir_a: PathBuf,
    #[arg(long)]
    dir_b: PathBuf,
    /// JSON report output path.
    #[arg(long)]
    out: PathBuf,
    /// Pull the feature extractor from a checkpoint instead of a seed.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Seed of the frozen extractor (ignored with --ckpt).
    #[arg(long, default_value_t = 7)]
    extractor_seed: u64,
    /// Optional per-channel weights (JSON: five arrays).
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Max control-point displacement of the synthetic warps, in [0, 0.3].
    #[arg(long, default_value_t = 0.15)]
    warp_magnitude: f64,
    /// Use rectangular box masks.
    #[arg(long)]
    box_mask: bool,
}

#[derive(Args)]
struct WarpDemoArgs {
    /// JSON file holding 50 numbers (25 interleaved x,y target points).
    #[arg(long)]
    theta_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    /// Checkerboard cell size in pixels.
    #[arg(long, default_value_t = 16)]
    cell: usize,
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    if let Some(path) = &args.dump_config {
        std::fs::write(path, TrainConfig::default().to_text())?;
        println!("wrote default config to {}", path.display());
        return Ok(());
    }
    let mut trainer = if let Some(ckpt) = &args.resume {
        Trainer::load(ckpt)?
    } else {
        let mut cfg = match &args.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        cfg.no_adv |= args.no_adv;
        cfg.paired_adv |= args.paired_adv;
        cfg.no_e2e_warp |= args.no_e2e_warp;
        cfg.box_mask |= args.box_mask;
        Trainer::new(cfg)?
    };
    let total = trainer.cfg.iterations;
    println!(
        "training to {total} iterations ({} triplets, batch {})",
        trainer.dataset().len(),
        trainer.cfg.batch_size
    );
    let start = std::time::Instant::now();
    while trainer.step_count() < total {
        let b = trainer.train_iteration()?;
        if b.step % 50 == 0 || b.step == total {
            println!(
                "step {:5}/{total}  total {:.4}  warp {:.4}  l1 {:.4}  perc {:.4}  adv_g {:.4}  adv_d {:.4}  gp {:.4}  [{:.0?}]",
                b.step, b.total, b.warp, b.l1, b.perceptual, b.adv_g, b.adv_d, b.gp,
                start.elapsed()
            );
        }
        if trainer.cfg.checkpoint_interval > 0 && b.step % trainer.cfg.checkpoint_interval == 0 {
            let dir = trainer.cfg.checkpoint_dir.clone();
            trainer.save(&dir.join(format!("step_{:06}.ckpt", b.step)))?;
            trainer.save(&dir.join("latest.ckpt"))?;
        }
    }
    let dir = trainer.cfg.checkpoint_dir.clone();
    trainer.save(&dir.join("latest.ckpt"))?;
    println!("saved {}", dir.join("latest.ckpt").display());
    Ok(())
}

fn run_infer(args: InferArgs) -> anyhow::Result<()> {
    let (_, model) = load_model(&args.ckpt)?;
    let person = Image::load_png(&args.person)?;
    let mask = Mask::load_png(&args.mask)?;
    let cloth = Image::load_png(&args.cloth)?;
    let spec = MaskSpec {
        mode: MaskMode::ParsingLike,
        fill: synth::DEFAULT_MASK_FILL,
        region: mask,
    };
    let (agnostic, _) = synth::make_agnostic(&person, &spec);
    let out = model.infer(&agnostic, &cloth)?;
    out.save_png(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let extractor = match &args.ckpt {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let extractor = PerceptualExtractor::seeded(args.extractor_seed);
            ckpt.apply_section("perceptual_extractor", &extractor.params(), &[])?;
            extractor
        }
        None => PerceptualExtractor::seeded(args.extractor_seed),
    };
    let weights = match &args.weights {
        Some(path) => LpipsWeights::load(path, &extractor)?,
        None => LpipsWeights::ones(&extractor),
    };
    let report = lpips_directory(&args.dir_a, &args.dir_b, &extractor, &weights)?;
    report.write_json(&args.out)?;
    println!(
        "{} pairs: mean {:.6} +/- {:.6} ({} skipped)",
        report.count,
        report.mean,
        report.std,
        report.skipped.len()
    );
    if !report.skipped.is_empty() {
        for s in &report.skipped {
            eprintln!("skipped {}: {}", s.name, s.reason);
        }
        anyhow::bail!(Error::format(format!(
            "{} pair(s) could not be evaluated",
            report.skipped.len()
        )));
    }
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let opts = SynthOptions {
        height: args.height,
        width: args.width,
        warp_magnitude: args.warp_magnitude,
        mask_mode: if args.box_mask {
            MaskMode::BoundingBox
        } else {
            MaskMode::ParsingLike
        },
        fill: synth::DEFAULT_MASK_FILL,
    };
    synth::write_dataset(&args.out, args.count, args.seed, &opts)?;
    println!(
        "wrote {} triplets to {} (manifest.csv, person/, cloth/, mask/)",
        args.count,
        args.out.display()
    );
    Ok(())
}

fn run_warp_demo(args: WarpDemoArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.theta_file)?;
    let values: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("theta file {}: {e}", args.theta_file.display())))?;
    let theta = TpsTheta::from_values(values)?;
    let board = checkerboard(args.height, args.width, args.cell.max(1));
    let warped = tps::warp(
        &theta,
        tps::shared_lattice(),
        &board.data.mapv(|v| v as f64),
        PadMode::Zeros,
    );
    Image::new(warped.mapv(|v| v as f32)).save_png(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::EvalLpips(args) => run_eval(args),
        Command::GenData(args) => run_gen_data(args),
        Command::WarpDemo(args) => run_warp_demo(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<Error>()
                .map(Error::exit_code)
                .unwrap_or(2);
            ExitCode::from(code as u8)
        }
    }
}
