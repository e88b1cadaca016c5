//! `usgen`: scan datasets, train either pipeline, synthesize, score with
//! FID and draw report figures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use usgen_core::config::{TrainConfig, SEED_ENV};
use usgen_core::dataset::{load_all, load_path, scan_dataset, DatasetManifest, Plane};
use usgen_core::imageops::IntensityCdf;
use usgen_core::metrics::{fid, FeatureExtractor, FidReport};
use usgen_core::report::{make_report, TraceTable};
use usgen_core::trainer::{run, synthesize};
use usgen_core::{Error, ImageBatch};

#[derive(Parser)]
#[command(name = "usgen", version, about = "Fetal ultrasound image synthesis")]
struct Cli {
    /// Seed for every random stream; falls back to USGEN_SEED, then the config, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the images of one plane and write a manifest.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        plane: Plane,
        /// Manifest path (default: manifest.tsv in the working directory).
        #[arg(long, default_value = "manifest.tsv")]
        out: PathBuf,
    },
    /// Train the pipeline described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` (dotted keys for sections); repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images from a trained checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Histogram-match diffusion samples before super-resolution.
        #[arg(long)]
        histmatch: bool,
        /// Reference CDF written by a dsr run (reference_cdf.tsv).
        #[arg(long)]
        reference_cdf: Option<PathBuf>,
    },
    /// FID between real images (manifest or directory) and a directory of samples.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// "tiny" or an extractor checkpoint file.
        #[arg(long, default_value = "tiny")]
        extractor: String,
        /// Side length both sets are resized to (default: that of the first fake image).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Real images drawn for the statistics (default: all).
        #[arg(long)]
        real_samples: Option<usize>,
        #[arg(long, default_value = "eval")]
        tag: String,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// CSV the result row is appended to.
        #[arg(long, default_value = "fid.csv")]
        out: PathBuf,
    },
    /// Loss curves, FID curves and a real/synthetic grid from run directories.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::ConfigMismatch { .. } => 1,
        _ => 2,
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Error> {
    match (flag, std::env::var(SEED_ENV).ok()) {
        (Some(s), _) => Ok(s),
        (None, Some(v)) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        (None, None) => Ok(0),
    }
}

fn main() -> ExitCode {
    // R1 needs gradients of gradients; candle reads this flag lazily per thread
    unsafe { std::env::set_var("CANDLE_GRAD_DO_NOT_DETACH", "1") };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("usgen {stage}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), (&'static str, Error)> {
    match cli.command {
        Command::Scan { root, plane, out } => scan(&root, plane, &out).map_err(|e| ("scan", e)),
        Command::Train { config, overrides, out, resume } => {
            train(&config, &overrides, &out, resume, cli.seed).map_err(|e| ("train", e))
        }
        Command::Synth { checkpoint, count, out, histmatch, reference_cdf } => {
            synth(&checkpoint, count, &out, histmatch, reference_cdf.as_deref(), cli.seed).map_err(|e| ("synth", e))
        }
        Command::Fid { real, fake, extractor, size, channels, real_samples, tag, epoch, out } => {
            let args = FidArgs { real, fake, extractor, size, channels, real_samples, tag, epoch, out };
            score(&args, cli.seed).map_err(|e| ("fid", e))
        }
        Command::Report { runs, out } => report(&runs, &out, cli.seed).map_err(|e| ("report", e)),
    }
}

fn scan(root: &Path, plane: Plane, out: &Path) -> Result<(), Error> {
    let outcome = scan_dataset(root, plane)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    outcome.manifest.write_tsv(out)?;
    log::info!("manifest written to {}", out.display());
    println!("count={}", outcome.manifest.count());
    Ok(())
}

fn train(config: &Path, overrides: &[String], out: &Path, resume: Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = TrainConfig::load(config, overrides)?;
    cfg.resolve_seed(seed, std::env::var(SEED_ENV).ok().as_deref())?;
    if resume.is_some() {
        cfg.resume = resume;
    }
    let artifacts = run(&cfg, out)?;
    if let Some(c) = artifacts.final_checkpoint() {
        log::info!("final checkpoint {}", c.display());
    }
    Ok(())
}

fn synth(checkpoint: &Path, count: usize, out: &Path, histmatch: bool, reference: Option<&Path>, seed: Option<u64>) -> Result<(), Error> {
    let seed = resolve_seed(seed)?;
    let cdf = reference.map(IntensityCdf::read_tsv).transpose()?;
    let images = synthesize(checkpoint, count, seed, histmatch, cdf.as_ref(), out)?;
    log::info!("{} images written to {}", images.count(), out.display());
    Ok(())
}

struct FidArgs {
    real: PathBuf,
    fake: PathBuf,
    extractor: String,
    size: Option<usize>,
    channels: usize,
    real_samples: Option<usize>,
    tag: String,
    epoch: u64,
    out: PathBuf,
}

/// Images of a directory (any plane) or of a manifest file.
fn manifest_of(path: &Path) -> Result<DatasetManifest, Error> {
    if path.is_dir() {
        Ok(scan_dataset(path, Plane::Other)?.manifest)
    } else {
        DatasetManifest::read_tsv(path)
    }
}

fn score(a: &FidArgs, seed: Option<u64>) -> Result<(), Error> {
    let seed = resolve_seed(seed)?;
    let extractor = FeatureExtractor::by_name(&a.extractor)?;
    let fakes_m = manifest_of(&a.fake)?;
    let size = match a.size {
        Some(s) => s,
        None => image_side(&fakes_m.records()[0].path)?,
    };
    let reals = load_all(&manifest_of(&a.real)?, size, a.channels)?;
    let fakes = load_all(&fakes_m, size, a.channels)?;
    let r = fid(&reals, &fakes, &extractor, a.real_samples, seed, a.epoch, &a.tag)?;
    r.append_to(&a.out)?;
    println!("fid={:.6}", r.fid);
    Ok(())
}

fn image_side(path: &Path) -> Result<usize, Error> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(w.min(h) as usize)
}

/// The newest `samples/epoch_<n>` directory of a run.
fn latest_samples(run: &Path) -> Option<PathBuf> {
    std::fs::read_dir(run.join("samples"))
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let n: u64 = e.file_name().to_str()?.strip_prefix("epoch_")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

fn report(runs: &[PathBuf], out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let seed = resolve_seed(seed)?;
    let mut traces = Vec::new();
    let mut fids = Vec::new();
    let mut synthetic = Vec::new();
    let mut real: Option<ImageBatch> = None;
    for dir in runs {
        let cfg = TrainConfig::load(&dir.join("config.toml"), &[])?;
        let tag = cfg.pipeline.as_str().to_string();
        let traces_path = dir.join("traces.csv");
        if traces_path.exists() {
            traces.push(TraceTable::read(&tag, &traces_path)?);
        }
        if dir.join("fid.csv").exists() {
            fids.extend(FidReport::read_csv(&dir.join("fid.csv"))?);
        }
        let Some(samples) = latest_samples(dir) else { continue };
        let mut files: Vec<PathBuf> = std::fs::read_dir(&samples)
            .map_err(|e| Error::Io { path: samples.clone(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("sample_")))
            .collect();
        files.sort();
        if files.is_empty() {
            continue;
        }
        let size = image_side(&files[0])?;
        let batch = ImageBatch::concat(&files.iter().map(|p| load_path(p, size, cfg.channels)).collect::<Result<Vec<_>, _>>()?)?;
        if real.is_none() {
            real = Some(load_all(&DatasetManifest::read_tsv(&dir.join("manifest.tsv"))?, size, cfg.channels)?);
        }
        synthetic.push((tag, batch));
    }
    // grids need one common size; keep the sets matching the first
    let real = real.unwrap_or_else(|| ImageBatch::zeros([0, 1, 1, 1]));
    synthetic.retain(|(_, b)| b.height() == real.height() && b.channels() == real.channels());
    let written = make_report(&traces, &fids, &real, &synthetic, seed, out)?;
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}
