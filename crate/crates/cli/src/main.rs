use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use qsam_core::arch::{count_params, NetConfig, REFERENCE_HINET_PARAMS, REFERENCE_QSAMNET_PARAMS};
use qsam_core::checkpoint::load_checkpoint;
use qsam_core::data::{list_pngs, PairedDataset};
use qsam_core::gradcheck::{layer_suite, GradCheckConfig};
use qsam_core::layers::Algebra;
use qsam_core::metrics::evaluate_dirs;
use qsam_core::synth::{make_dataset, RainParams};
use qsam_core::train::{train, TrainConfig, Trainer};
use qsam_core::{decode_image, encode_image, ColorImage, Error};

mod exit {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    pub const SHAPE: u8 = 5;
    pub const NON_FINITE: u8 = 6;
    pub const GRADCHECK: u8 = 7;
}

#[derive(Parser)]
#[command(name = "qsam", version, about = "Quaternion rain-streak removal toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired rainy/clean dataset from clean images.
    Synth(SynthArgs),
    /// Train a network on a paired dataset.
    Train(TrainArgs),
    /// Restore every PNG in a directory with a trained checkpoint.
    Derain(DerainArgs),
    /// Score restored images against ground truth (PSNR/SSIM on Y).
    Eval(EvalArgs),
    /// Finite-difference gradient checks over all layer operations.
    Gradcheck(GradcheckArgs),
    /// Report parameter counts for a network configuration and its real twin.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    clean_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    streaks_per_mpx: Option<f64>,
    #[arg(long)]
    len_min: Option<f64>,
    #[arg(long)]
    len_max: Option<f64>,
    #[arg(long)]
    width_min: Option<f64>,
    #[arg(long)]
    width_max: Option<f64>,
    /// Maximum streak deviation from vertical, degrees.
    #[arg(long)]
    angle_range: Option<f64>,
    #[arg(long)]
    intensity_min: Option<f64>,
    #[arg(long)]
    intensity_max: Option<f64>,
    #[arg(long)]
    blur_sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    patch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr_start: f64,
    #[arg(long, default_value_t = 1e-7)]
    lr_end: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128, 256])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 0.2)]
    leaky: f64,
    /// Train the structurally matched real-valued network instead.
    #[arg(long)]
    real: bool,
    /// Write a checkpoint every N iterations (0: only the final one).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from a checkpoint; network and training flags come from the file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DerainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the first-stage restoration as `<name>_stage1.png`.
    #[arg(long)]
    emit_stage1: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    restored: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    probes: usize,
}

#[derive(Args)]
struct ParamsArgs {
    /// `default` or a JSON network configuration file.
    #[arg(long, default_value = "default")]
    config: String,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Image { .. } | Error::Dataset(_)) => exit::IO,
        Some(Error::Checkpoint(_)) => exit::CHECKPOINT,
        Some(Error::Shape(_)) => exit::SHAPE,
        Some(Error::NonFinite { .. }) => exit::NON_FINITE,
        Some(Error::Config(_) | Error::InvalidValue(_)) => exit::USAGE,
        None if err.downcast_ref::<std::io::Error>().is_some() => exit::IO,
        None => 1,
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: code_for(&error),
            error,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Derain(a) => derain(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut p = RainParams {
        seed: a.seed,
        ..Default::default()
    };
    p.streaks_per_mpx = a.streaks_per_mpx.unwrap_or(p.streaks_per_mpx);
    p.length = (a.len_min.unwrap_or(p.length.0), a.len_max.unwrap_or(p.length.1));
    p.width = (a.width_min.unwrap_or(p.width.0), a.width_max.unwrap_or(p.width.1));
    p.angle_range_deg = a.angle_range.unwrap_or(p.angle_range_deg);
    p.intensity = (
        a.intensity_min.unwrap_or(p.intensity.0),
        a.intensity_max.unwrap_or(p.intensity.1),
    );
    p.blur_sigma = a.blur_sigma.unwrap_or(p.blur_sigma);
    let ds = make_dataset(&a.clean_dir, &p, a.pairs, &a.out)?;
    println!("wrote {} pairs to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let data = PairedDataset::load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut t = Trainer::from_checkpoint(ckpt)?;
            if a.iters != t.config().iterations {
                eprintln!(
                    "note: resuming a run configured for {} iterations; --iters {} ignored",
                    t.config().iterations,
                    a.iters
                );
            }
            t.set_checkpoint_every(a.checkpoint_every);
            t
        }
        None => {
            let net = NetConfig {
                widths: a.widths.clone(),
                blocks: a.blocks,
                leaky_slope: a.leaky,
                algebra: if a.real { Algebra::Real } else { Algebra::Quaternion },
                ..Default::default()
            };
            let cfg = TrainConfig {
                patch: a.patch,
                batch: a.batch,
                iterations: a.iters,
                lr_start: a.lr_start,
                lr_end: a.lr_end,
                seed: a.seed,
                checkpoint_every: a.checkpoint_every,
            };
            Trainer::new(&net, &cfg)?
        }
    };
    let start = trainer.iteration();
    let out = train(&mut trainer, &data, &a.out)?;
    if let Some(last) = out.records.last() {
        println!(
            "iterations {}..{}: final loss {:.6e} (stage 1 {:.6e}, stage 2 {:.6e})",
            start + 1,
            last.iteration,
            last.total,
            last.stage1,
            last.stage2
        );
    }
    println!("checkpoint: {}", out.final_checkpoint.display());
    println!("loss trace: {}", out.loss_csv.display());
    Ok(())
}

fn derain(a: DerainArgs) -> Result<(), Failure> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (net, store) = ckpt.build()?;
    let names = list_pngs(&a.input)?;
    if names.is_empty() {
        return Err(anyhow::Error::from(Error::Dataset(format!("no PNG images in {}", a.input.display()))).into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if same_dir(&a.input, &a.out) {
        return Err(Failure {
            code: exit::USAGE,
            error: anyhow!("--out must differ from --in so inputs are never overwritten"),
        });
    }
    let m = net.config().size_multiple();
    for name in &names {
        let img = ColorImage::load_png(&a.input.join(name))?;
        let (h, w) = (img.height(), img.width());
        let padded = img.reflect_pad_to(h.div_ceil(m) * m, w.div_ceil(m) * m);
        let q = encode_image::<f32>(&padded)?;
        let (x1, x2) = net.restore(&store, &q)?;
        let crop = |q| decode_image(q, 0).crop(0, 0, h, w);
        crop(&x2)?.save_png(&a.out.join(name))?;
        if a.emit_stage1 {
            let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
            crop(&x1)?.save_png(&a.out.join(format!("{stem}_stage1.png")))?;
        }
    }
    println!("restored {} images into {}", names.len(), a.out.display());
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let report = evaluate_dirs(&a.restored, &a.clean)?;
    for (name, why) in &report.failures {
        eprintln!("skipped {name}: {why}");
    }
    if report.entries.is_empty() {
        return Err(anyhow::Error::from(Error::Dataset("no image pairs could be scored".into())).into());
    }
    report.write_csv(&a.out)?;
    println!(
        "{} images: mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.entries.len(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.probes == 0 {
        return Err(anyhow::Error::from(Error::Config("--probes must be positive".into())).into());
    }
    let cfg = GradCheckConfig {
        tolerance: a.tol,
        ..Default::default()
    };
    let suite = layer_suite(cfg, a.seed, a.probes)?;
    println!(
        "{:<30} {:>7} {:>8} {:>6} {:>12}  result",
        "operation", "probes", "coords", "kinks", "max rel err"
    );
    let mut failed = 0;
    for e in &suite {
        let ok = e.report.passed();
        failed += usize::from(!ok);
        println!(
            "{:<30} {:>7} {:>8} {:>6} {:>12.3e}  {}",
            e.name,
            e.probes,
            e.report.coords_checked,
            e.report.kinks_skipped,
            e.report.max_rel_error,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: exit::GRADCHECK,
            error: anyhow!("{failed} of {} gradient checks exceeded tolerance {}", suite.len(), a.tol),
        });
    }
    Ok(())
}

fn params(a: ParamsArgs) -> Result<(), Failure> {
    let config = if a.config == "default" {
        NetConfig::default()
    } else {
        let path = Path::new(&a.config);
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        match serde_json::from_str::<NetConfig>(&text) {
            Ok(c) => c,
            Err(e) => {
                return Err(Failure {
                    code: exit::USAGE,
                    error: anyhow!("{}: {e}", path.display()),
                })
            }
        }
    };
    let report = count_params(&config)?;
    let (qw, rw) = report.conv_weights();
    println!("widths {:?}, {} blocks per scale, {}x{} kernels", config.widths, config.blocks, config.kernel, config.kernel);
    println!("quaternion network parameters: {}", report.total);
    println!("real-valued twin parameters:   {}", report.real_twin_total);
    println!("overall ratio: {:.4}", report.overall_ratio());
    println!("conv weights: {qw} vs {rw} (ratio {})", rw as f64 / qw as f64);
    let mut ratios: Vec<f64> = report.convs.iter().map(|c| c.ratio()).collect();
    ratios.dedup();
    println!("per-conv weight ratio: {}", if ratios == [4.0] { "4 for every conv layer".to_string() } else { format!("{ratios:?}") });
    println!(
        "reference totals: {REFERENCE_QSAMNET_PARAMS} (QSAM-Net), {REFERENCE_HINET_PARAMS} (HINet), ratio {:.2}",
        REFERENCE_HINET_PARAMS as f64 / REFERENCE_QSAMNET_PARAMS as f64
    );
    Ok(())
}
