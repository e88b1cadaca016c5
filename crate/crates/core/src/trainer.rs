//! End-to-end training runs: data loading, the training loops of either
//! pipeline, periodic FID and sample dumps, checkpoints, resume, figures
//! and synthesis from a finished checkpoint.
//!
//! Output layout of a run directory:
//!
//! ```text
//! config.toml  manifest.tsv  traces.csv  fid.csv
//! traces_diffusion.csv  reference_cdf.tsv        (dsr only)
//! checkpoints/<stage>_<unit>.ckpt
//! samples/epoch_<n>/sample_<i>.png, grid.png
//! figures/losses.svg, fid.svg, samples.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde_json::{json, Value};

use crate::batch::ImageBatch;
use crate::checkpoint::{ModelCheckpoint, RngState};
use crate::config::{Pipeline, TrainConfig};
use crate::dataset::{load_all, save_png, scan_dataset, DatasetManifest};
use crate::diffusion::{self, DiffusionSchedule, DiffusionTrainConfig, DiffusionTraceRow, DiffusionTrainer, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::imageops::{build_reference_pool, histogram_match, IntensityCdf};
use crate::metrics::{fid, FeatureExtractor, FidReport};
use crate::nn::NamedArray;
use crate::report::{self, TraceTable};
use crate::rng::derive_seed;
use crate::superres::{sr_generate, SrConfig, SrGenerator, SrTrainConfig, SrTraceRow, SrTrainer};
use crate::tbgan::{generate, sample_latents, APAState, StyleGenerator, TbGanConfig, TbGanTraceRow, TbGanTrainConfig, TbGanTrainer};

/// Images per forward pass when sampling or generating for evaluation.
const GENERATION_CHUNK: usize = 16;
/// Individual PNGs kept per evaluation; the grid shows the same images.
const SAVED_SAMPLES: usize = 16;

/// Paths written by [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub traces: PathBuf,
    pub diffusion_traces: Option<PathBuf>,
    pub fid: PathBuf,
    pub reference_cdf: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub sample_dirs: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
    pub fid_reports: Vec<FidReport>,
}

impl RunArtifacts {
    /// The most recent checkpoint.
    pub fn final_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }

    fn listing(&self) -> Vec<PathBuf> {
        let mut all = vec![self.config.clone(), self.manifest.clone(), self.traces.clone(), self.fid.clone()];
        all.extend(self.diffusion_traces.clone());
        all.extend(self.reference_cdf.clone());
        all.extend(self.checkpoints.iter().cloned());
        all.extend(self.sample_dirs.iter().cloned());
        all.extend(self.figures.iter().cloned());
        all.retain(|p| p.exists());
        all
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Entries under `prefix` with the prefix removed.
fn strip_prefix(arrays: &BTreeMap<String, NamedArray>, prefix: &str) -> BTreeMap<String, NamedArray> {
    arrays
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

fn with_prefix(arrays: BTreeMap<String, NamedArray>, prefix: &str) -> BTreeMap<String, NamedArray> {
    arrays.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

/// Writes up to [`SAVED_SAMPLES`] images and their grid to `dir`.
fn dump_samples(batch: &ImageBatch, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let keep: Vec<usize> = (0..batch.count().min(SAVED_SAMPLES)).collect();
    let shown = batch.select(&keep);
    for i in 0..shown.count() {
        save_png(&shown, i, &dir.join(format!("sample_{i:04}.png")))?;
    }
    save_png(&report::tile(&shown, 4)?, 0, &dir.join("grid.png"))
}

/// Draws `count` diffusion samples in chunks; chunk `k` is seeded with
/// `derive_seed(seed, "sample-chunk", k)`.
pub fn sample_diffusion(model: &UNet, s: &DiffusionSchedule, count: usize, channels: usize, size: usize, seed: u64) -> Result<ImageBatch> {
    let device = model.params().device().clone();
    let mut parts = Vec::new();
    let mut done = 0;
    let mut k = 0u64;
    while done < count {
        let n = GENERATION_CHUNK.min(count - done);
        let x = diffusion::sample(model, s, n, channels, size, derive_seed(seed, "sample-chunk", k), &device)?;
        parts.push(ImageBatch::from_tensor(&x)?);
        done += n;
        k += 1;
    }
    ImageBatch::concat(&parts)
}

/// Generates `count` TB-GAN images in chunks from seeded latents.
pub fn sample_tbgan(g: &StyleGenerator, count: usize, seed: u64) -> Result<ImageBatch> {
    let device = g.params().device().clone();
    let latents = sample_latents(count, g.config().latent_dim, derive_seed(seed, "latents", 0), &device)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < count {
        let n = GENERATION_CHUNK.min(count - start);
        parts.push(generate(g, &latents.narrow(0, start, n)?, derive_seed(seed, "noise", start as u64))?);
        start += n;
    }
    ImageBatch::concat(&parts)
}

fn super_resolve(g: &SrGenerator, low: &ImageBatch) -> Result<ImageBatch> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < low.count() {
        let n = GENERATION_CHUNK.min(low.count() - start);
        let idx: Vec<usize> = (start..start + n).collect();
        parts.push(sr_generate(g, &low.select(&idx))?);
        start += n;
    }
    ImageBatch::concat(&parts)
}

/// Architecture record of a dsr run.
pub fn dsr_architecture(unet: &UNetConfig, s: &DiffusionSchedule, beta: (f64, f64), sr: &SrConfig) -> Result<Value> {
    Ok(json!({
        "unet": to_json(unet)?,
        "schedule": {"timesteps": s.steps(), "beta_start": beta.0, "beta_end": beta.1},
        "sr": to_json(sr)?,
    }))
}

struct RunContext<'a> {
    cfg: &'a TrainConfig,
    seed: u64,
    config_json: Value,
    extractor: FeatureExtractor,
    out: RunArtifacts,
}

impl RunContext<'_> {
    fn checkpoint(&mut self, stage: &str, unit: u64, pipeline: &str, arch: &Value, arrays: BTreeMap<String, NamedArray>, aux: Value) -> Result<()> {
        let mut ck = ModelCheckpoint::new(
            pipeline,
            arch.clone(),
            self.config_json.clone(),
            unit,
            RngState {
                seed: self.seed,
                next_unit: unit,
            },
            arrays,
        );
        ck.aux = aux;
        let path = self.out.out_dir.join("checkpoints").join(format!("{stage}_{unit:06}.ckpt"));
        ck.save(&path)?;
        log::info!("checkpoint {}", path.display());
        self.out.checkpoints.push(path);
        Ok(())
    }

    fn evaluate(&mut self, reals: &ImageBatch, fakes: &ImageBatch, epoch: u64, tag: &str) -> Result<()> {
        let report = fid(reals, fakes, &self.extractor, self.cfg.fid_real_samples, derive_seed(self.seed, "fid", 0), epoch, tag)?;
        log::info!("epoch {epoch}: FID {:.4} ({tag})", report.fid);
        report.append_to(&self.out.fid)?;
        self.out.fid_reports.push(report);
        let dir = self.out.out_dir.join("samples").join(format!("epoch_{epoch}"));
        dump_samples(fakes, &dir)?;
        self.out.sample_dirs.push(dir);
        Ok(())
    }

    fn due(every: u64, unit: u64, done: bool) -> bool {
        done || unit % every == 0
    }
}

/// Trains the configured pipeline into `out_dir`. On failure the artifacts
/// written so far are kept and listed in `out_dir/error_report.txt`.
pub fn run(cfg: &TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let mut ctx = RunContext {
        cfg,
        seed: cfg.seed(),
        config_json: to_json(cfg)?,
        extractor: FeatureExtractor::by_name(&cfg.extractor)?,
        out: RunArtifacts {
            out_dir: out_dir.to_path_buf(),
            config: out_dir.join("config.toml"),
            manifest: out_dir.join("manifest.tsv"),
            traces: out_dir.join("traces.csv"),
            fid: out_dir.join("fid.csv"),
            ..Default::default()
        },
    };
    let result = match cfg.pipeline {
        Pipeline::Dsr => run_dsr(&mut ctx),
        Pipeline::Tbgan => run_tbgan(&mut ctx),
    };
    match result {
        Ok(()) => Ok(ctx.out),
        Err(e) => {
            let mut text = format!("run failed: {e}\n\nartifacts written before the failure:\n");
            for p in ctx.out.listing() {
                text.push_str(&format!("{}\n", p.display()));
            }
            let path = out_dir.join("error_report.txt");
            if let Err(w) = fs::write(&path, text) {
                log::error!("could not write {}: {w}", path.display());
            }
            Err(e)
        }
    }
}

fn prepare(ctx: &mut RunContext) -> Result<DatasetManifest> {
    let cfg = ctx.cfg;
    fs::write(&ctx.out.config, cfg.to_toml()?).map_err(|e| Error::io(&ctx.out.config, e))?;
    let scan = scan_dataset(&cfg.data_root, cfg.plane)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    scan.manifest.write_tsv(&ctx.out.manifest)?;
    log::info!("{} training images ({:?})", scan.manifest.count(), cfg.plane);
    create_dir(&ctx.out.out_dir.join("checkpoints"))?;
    Ok(scan.manifest)
}

fn load_resume(cfg: &TrainConfig, pipeline: &str, arch: &Value, seed: u64) -> Result<Option<ModelCheckpoint>> {
    let Some(path) = &cfg.resume else { return Ok(None) };
    let ck = ModelCheckpoint::load(path)?;
    ck.check_pipeline(pipeline)?;
    ck.check_architecture(arch)?;
    if ck.rng.seed != seed {
        return Err(Error::ConfigMismatch {
            keys: vec![format!("seed ({} vs {seed})", ck.rng.seed)],
        });
    }
    log::info!("resuming from {} at unit {}", path.display(), ck.rng.next_unit);
    Ok(Some(ck))
}

fn run_dsr(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let d = &cfg.dsr;
    let seed = ctx.seed;
    let device = Device::Cpu;
    let manifest = prepare(ctx)?;
    let (low, high) = (d.low_resolution, d.high_resolution());
    let unet_cfg = d.unet_config(cfg.channels)?;
    let schedule = DiffusionSchedule::linear(d.timesteps, d.beta_start, d.beta_end)?;
    let sr_cfg = d.sr_config(cfg.channels)?;
    let arch = dsr_architecture(&unet_cfg, &schedule, (d.beta_start, d.beta_end), &sr_cfg)?;

    let reals_low = load_all(&manifest, low, cfg.channels)?;
    let reals_high = load_all(&manifest, high, cfg.channels)?;
    let reference = build_reference_pool(
        &manifest,
        d.reference_samples.unwrap_or(manifest.count()),
        derive_seed(seed, "reference-pool", 0),
        low,
        cfg.channels,
    )?;
    let cdf_path = ctx.out.out_dir.join("reference_cdf.tsv");
    reference.write_tsv(&cdf_path)?;
    ctx.out.reference_cdf = Some(cdf_path);

    let mut diff = DiffusionTrainer::new(
        unet_cfg.clone(),
        schedule.clone(),
        DiffusionTrainConfig {
            units: cfg.epochs,
            unit: cfg.unit,
            batch_size: cfg.batch_size,
            lr: d.diffusion_lr,
            adam_betas: cfg.adam_betas,
            seed: derive_seed(seed, "diffusion", 0),
            augment: cfg.augment.clone(),
        },
        &device,
    )?;
    let mut sr = SrTrainer::new(
        sr_cfg,
        SrTrainConfig {
            units: d.sr_epochs,
            unit: cfg.unit,
            batch_size: cfg.batch_size,
            lr_generator: cfg.lr_generator,
            lr_discriminator: cfg.lr_discriminator,
            adam_betas: cfg.adam_betas,
            lambda_adv: d.lambda_adv,
            feature_content: d.feature_content,
            seed: derive_seed(seed, "superres", 0),
            augment: cfg.augment.clone(),
        },
        &device,
    )?;

    let resume = load_resume(cfg, "dsr", &arch, seed)?;
    match &resume {
        Some(ck) => {
            let next = ck.rng.next_unit;
            match ck.aux.get("stage").and_then(Value::as_str) {
                Some("diffusion") => diff.import_state(&strip_prefix(&ck.arrays, "diffusion."), next)?,
                Some("sr") => {
                    diff.import_state(&strip_prefix(&ck.arrays, "diffusion."), cfg.epochs)?;
                    sr.import_state(&strip_prefix(&ck.arrays, "sr."), next)?;
                }
                other => {
                    return Err(Error::Format {
                        what: "checkpoint".into(),
                        path: cfg.resume.clone().unwrap_or_default(),
                        detail: format!("unknown dsr stage {other:?}"),
                    })
                }
            }
        }
        None => {
            if let Some(p) = &d.pretrained {
                let ck = ModelCheckpoint::load(p)?;
                ck.check_pipeline("dsr")?;
                let keys = crate::checkpoint::config_diff(&ck.architecture["unet"], &arch["unet"]);
                if !keys.is_empty() {
                    return Err(Error::ConfigMismatch {
                        keys: keys.into_iter().map(|k| format!("unet.{k}")).collect(),
                    });
                }
                diff.model().params().import(&ck.arrays, "diffusion.model.")?;
                log::info!("diffusion weights from {}", p.display());
            }
        }
    }

    // diffusion finetuning
    let diff_trace = ctx.out.out_dir.join("traces_diffusion.csv");
    ctx.out.diffusion_traces = Some(diff_trace.clone());
    if !diff.is_done() {
        let every = cfg.checkpoint_every;
        diff.train(&reals_low, |t, row: &DiffusionTraceRow| {
            log::info!("diffusion epoch {}: loss {:.5}", row.epoch, row.mean_loss);
            append_line(&diff_trace, DiffusionTraceRow::HEADER, &row.csv())?;
            if RunContext::due(every, row.epoch, t.is_done()) {
                let arrays = with_prefix(t.export_state()?, "diffusion.");
                ctx.checkpoint("diffusion", row.epoch, "dsr", &arch, arrays, json!({"stage": "diffusion"}))?;
            }
            Ok(())
        })?;
    }

    // fixed low-resolution evaluation set, histogram matched to the reals
    log::info!("sampling {} low-resolution images", cfg.eval_samples);
    let mut eval_low = sample_diffusion(diff.model(), &schedule, cfg.eval_samples, cfg.channels, low, derive_seed(seed, "eval-samples", 0))?;
    if d.histmatch {
        eval_low = histogram_match(&eval_low, &reference)?;
    }

    let diff_state = with_prefix(diff.export_state()?, "diffusion.");
    let sr_checkpoint = |ctx: &mut RunContext, t: &SrTrainer, unit: u64| -> Result<()> {
        let mut arrays = diff_state.clone();
        arrays.extend(with_prefix(t.export_state()?, "sr."));
        ctx.checkpoint("sr", unit, "dsr", &arch, arrays, json!({"stage": "sr"}))
    };
    if sr.next_unit() == 0 {
        let fakes = super_resolve(sr.generator(), &eval_low)?;
        ctx.evaluate(&reals_high, &fakes, 0, "dsr")?;
        sr_checkpoint(ctx, &sr, 0)?;
    }
    let (eval_every, ckpt_every) = (cfg.eval_every, cfg.checkpoint_every);
    let traces = ctx.out.traces.clone();
    let mut last_fakes = None;
    sr.train(&reals_high, |t, row: &SrTraceRow| {
        log::info!("sr epoch {}: g {:.5} d {:.5} content {:.5}", row.epoch, row.g_loss, row.d_loss, row.content_loss);
        append_line(&traces, SrTraceRow::HEADER, &row.csv())?;
        if RunContext::due(eval_every, row.epoch, t.is_done()) {
            let fakes = super_resolve(t.generator(), &eval_low)?;
            ctx.evaluate(&reals_high, &fakes, row.epoch, "dsr")?;
            last_fakes = Some(fakes);
        }
        if RunContext::due(ckpt_every, row.epoch, t.is_done()) {
            sr_checkpoint(ctx, t, row.epoch)?;
        }
        Ok(())
    })?;
    let fakes = match last_fakes {
        Some(f) => f,
        None => super_resolve(sr.generator(), &eval_low)?,
    };
    finish_figures(ctx, &reals_high, fakes, "dsr")
}

fn run_tbgan(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let t = &cfg.tbgan;
    let seed = ctx.seed;
    let device = Device::Cpu;
    let manifest = prepare(ctx)?;
    let arch_cfg: TbGanConfig = t.architecture(cfg.channels)?;
    let arch = to_json(&arch_cfg)?;
    let reals = load_all(&manifest, arch_cfg.resolution, cfg.channels)?;
    let mut trainer = TbGanTrainer::new(
        arch_cfg,
        TbGanTrainConfig {
            units: cfg.epochs,
            unit: cfg.unit,
            batch_size: cfg.batch_size,
            lr_generator: cfg.lr_generator,
            lr_discriminator: cfg.lr_discriminator,
            adam_betas: cfg.adam_betas,
            r1_gamma: t.r1_gamma,
            policy: t.diffaug.clone(),
            apa: t.apa,
            apa_target: t.apa_target,
            apa_traverse_images: t.apa_traverse_images,
            seed,
        },
        &device,
    )?;
    match load_resume(cfg, "tbgan", &arch, seed)? {
        Some(ck) => {
            let apa: APAState = serde_json::from_value(ck.aux["apa"].clone()).map_err(|e| Error::Format {
                what: "checkpoint".into(),
                path: cfg.resume.clone().unwrap_or_default(),
                detail: format!("APA state: {e}"),
            })?;
            trainer.import_state(&ck.arrays, ck.rng.next_unit, apa)?;
        }
        None => {
            if let Some(p) = &t.init_checkpoint {
                trainer.load_pretrained(&ModelCheckpoint::load(p)?)?;
                log::info!("initialised from {}", p.display());
            }
        }
    }
    let eval_seed = derive_seed(seed, "eval-samples", 0);
    let save = |ctx: &mut RunContext, tr: &TbGanTrainer, unit: u64| -> Result<()> {
        ctx.checkpoint("tbgan", unit, "tbgan", &arch, tr.export_state()?, json!({"apa": to_json(tr.apa())?}))
    };
    if trainer.next_unit() == 0 {
        let fakes = sample_tbgan(trainer.generator(), cfg.eval_samples, eval_seed)?;
        ctx.evaluate(&reals, &fakes, 0, "tbgan")?;
        save(ctx, &trainer, 0)?;
    }
    let (eval_every, ckpt_every) = (cfg.eval_every, cfg.checkpoint_every);
    let traces = ctx.out.traces.clone();
    let mut last_fakes = None;
    trainer.train(&reals, |tr, row: &TbGanTraceRow| {
        log::info!("tbgan {} {}: g {:.5} d {:.5} p {:.4}", if cfg.unit == crate::dataset::Unit::Step { "step" } else { "epoch" }, row.epoch, row.g_loss, row.d_loss, row.apa_p);
        append_line(&traces, TbGanTraceRow::HEADER, &row.csv())?;
        if RunContext::due(eval_every, row.epoch, tr.is_done()) {
            let fakes = sample_tbgan(tr.generator(), cfg.eval_samples, eval_seed)?;
            ctx.evaluate(&reals, &fakes, row.epoch, "tbgan")?;
            last_fakes = Some(fakes);
        }
        if RunContext::due(ckpt_every, row.epoch, tr.is_done()) {
            save(ctx, tr, row.epoch)?;
        }
        Ok(())
    })?;
    let fakes = match last_fakes {
        Some(f) => f,
        None => sample_tbgan(trainer.generator(), cfg.eval_samples, eval_seed)?,
    };
    finish_figures(ctx, &reals, fakes, "tbgan")
}

fn finish_figures(ctx: &mut RunContext, reals: &ImageBatch, fakes: ImageBatch, tag: &str) -> Result<()> {
    let mut traces = Vec::new();
    if ctx.out.traces.exists() {
        traces.push(TraceTable::read(tag, &ctx.out.traces)?);
    }
    if let Some(p) = ctx.out.diffusion_traces.as_ref().filter(|p| p.exists()) {
        traces.push(TraceTable::read("diffusion", p)?);
    }
    let fid_reports = FidReport::read_csv(&ctx.out.fid)?;
    ctx.out.figures = report::make_report(
        &traces,
        &fid_reports,
        reals,
        &[(tag.to_string(), fakes)],
        derive_seed(ctx.seed, "figures", 0),
        &ctx.out.out_dir.join("figures"),
    )?;
    Ok(())
}

/// Generates `count` images from a finished checkpoint of either pipeline
/// and writes them as `sample_<i>.png` plus `grid.png` into `out_dir`.
///
/// For dsr checkpoints `histmatch` applies the reference CDF between the
/// diffusion and super-resolution stages; it is an error without one.
pub fn synthesize(
    ckpt_path: &Path,
    count: usize,
    seed: u64,
    histmatch: bool,
    reference_cdf: Option<&IntensityCdf>,
    out_dir: &Path,
) -> Result<ImageBatch> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let ck = ModelCheckpoint::load(ckpt_path)?;
    let device = Device::Cpu;
    let bad = |detail: String| Error::Format {
        what: "checkpoint".into(),
        path: ckpt_path.to_path_buf(),
        detail,
    };
    let images = match ck.pipeline.as_str() {
        "dsr" => {
            if histmatch && reference_cdf.is_none() {
                return Err(Error::InvalidArgument(
                    "histogram matching needs a reference CDF (--reference-cdf)".into(),
                ));
            }
            if ck.aux.get("stage").and_then(Value::as_str) != Some("sr") {
                return Err(bad("checkpoint holds no super-resolution weights".into()));
            }
            let unet_cfg: UNetConfig = serde_json::from_value(ck.architecture["unet"].clone()).map_err(|e| bad(e.to_string()))?;
            let sr_cfg: SrConfig = serde_json::from_value(ck.architecture["sr"].clone()).map_err(|e| bad(e.to_string()))?;
            let sched = &ck.architecture["schedule"];
            let field = |k: &str| sched[k].as_f64().ok_or_else(|| bad(format!("schedule.{k} missing")));
            let schedule = DiffusionSchedule::linear(field("timesteps")? as usize, field("beta_start")?, field("beta_end")?)?;
            let unet = UNet::new(unet_cfg.clone(), 0, &device)?;
            unet.params().import(&ck.arrays, "diffusion.model.")?;
            let g = SrGenerator::new(sr_cfg, 0, &device)?;
            g.params().import(&ck.arrays, "sr.g.")?;
            let mut low = sample_diffusion(&unet, &schedule, count, unet_cfg.image_channels, unet_cfg.size, derive_seed(seed, "synth", 0))?;
            if histmatch {
                if let Some(r) = reference_cdf {
                    low = histogram_match(&low, r)?;
                }
            }
            super_resolve(&g, &low)?
        }
        "tbgan" => {
            let arch: TbGanConfig = serde_json::from_value(ck.architecture.clone()).map_err(|e| bad(e.to_string()))?;
            let g = StyleGenerator::new(arch, 0, &device)?;
            g.params().import(&ck.arrays, "g.")?;
            sample_tbgan(&g, count, derive_seed(seed, "synth", 0))?
        }
        other => return Err(bad(format!("unknown pipeline {other:?}"))),
    };
    create_dir(out_dir)?;
    for i in 0..images.count() {
        save_png(&images, i, &out_dir.join(format!("sample_{i:04}.png")))?;
    }
    save_png(&report::tile(&images, (images.count() as f64).sqrt().ceil() as usize)?, 0, &out_dir.join("grid.png"))?;
    Ok(images)
}
