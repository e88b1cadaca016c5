use std::fs;
use std::path::{Path, PathBuf};

use usgen_core::checkpoint::ModelCheckpoint;
use usgen_core::config::TrainConfig;
use usgen_core::imageops::IntensityCdf;
use usgen_core::metrics::FidReport;
use usgen_core::phantom::write_phantoms;
use usgen_core::trainer::{run, synthesize};
use usgen_core::Error;

fn dataset(dir: &Path, count: usize) -> PathBuf {
    let root = dir.join("data");
    write_phantoms(&root.join("Trans-cerebellum"), count, 32, 11).unwrap();
    root
}

fn dsr_config(root: &Path, epochs: u64, sr_epochs: u64) -> TrainConfig {
    let text = format!(
        r#"
pipeline = "dsr"
plane = "trans-cerebellum"
data_root = {root:?}
epochs = {epochs}
batch_size = 4
lr_generator = 1e-4
lr_discriminator = 1e-4
adam_betas = [0.9, 0.999]
seed = 5
eval_every = 1
checkpoint_every = 1
eval_samples = 4

[dsr]
unet = "tiny"
sr = "tiny"
low_resolution = 16
timesteps = 8
beta_start = 0.01
beta_end = 0.3
sr_epochs = {sr_epochs}
"#
    );
    TrainConfig::from_toml(&text, &[]).unwrap()
}

fn tbgan_config(root: &Path, epochs: u64) -> TrainConfig {
    let text = format!(
        r#"
pipeline = "tbgan"
plane = "trans-cerebellum"
data_root = {root:?}
epochs = {epochs}
batch_size = 4
lr_generator = 1e-5
lr_discriminator = 1e-4
adam_betas = [0.0, 0.99]
seed = 3
eval_every = 1
checkpoint_every = 1
eval_samples = 4

[tbgan]
preset = "tiny"
resolution = 16
apa_traverse_images = 64.0
"#
    );
    TrainConfig::from_toml(&text, &[]).unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    // wall time is the last column and varies between runs
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn dsr_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path(), 8);
    let out = tmp.path().join("run");
    let a = run(&dsr_config(&root, 2, 2), &out).unwrap();
    for p in [&a.config, &a.manifest, &a.traces, &a.fid] {
        assert!(p.exists(), "{}", p.display());
    }
    assert!(a.reference_cdf.as_ref().unwrap().exists());
    assert_eq!(data_lines(a.diffusion_traces.as_ref().unwrap()).len(), 3);
    assert_eq!(data_lines(&a.traces).len(), 3);
    let fids = FidReport::read_csv(&a.fid).unwrap();
    assert_eq!(fids.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1, 2]);
    assert!(fids.iter().all(|r| r.fid.is_finite() && r.model_tag == "dsr"));
    assert!(out.join("samples/epoch_2/grid.png").exists());
    for f in ["losses.svg", "fid.svg", "samples.png"] {
        assert!(out.join("figures").join(f).exists(), "{f}");
    }
    let names: Vec<_> = a.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["diffusion_000001.ckpt", "diffusion_000002.ckpt", "sr_000000.ckpt", "sr_000001.ckpt", "sr_000002.ckpt"]);

    let cdf = IntensityCdf::read_tsv(a.reference_cdf.as_ref().unwrap()).unwrap();
    let synth_dir = tmp.path().join("synth");
    let images = synthesize(a.final_checkpoint().unwrap(), 3, 9, true, Some(&cdf), &synth_dir).unwrap();
    assert_eq!(images.shape(), [3, 1, 32, 32]);
    assert!(synth_dir.join("sample_0002.png").exists() && synth_dir.join("grid.png").exists());
    let again = synthesize(a.final_checkpoint().unwrap(), 3, 9, true, Some(&cdf), &tmp.path().join("synth2")).unwrap();
    assert_eq!(images, again);
    assert!(matches!(
        synthesize(a.final_checkpoint().unwrap(), 3, 9, true, None, &synth_dir),
        Err(Error::InvalidArgument(_))
    ));
    // a diffusion-stage checkpoint cannot super-resolve
    assert!(synthesize(&a.checkpoints[0], 2, 9, false, None, &synth_dir).is_err());
}

#[test]
fn zero_epochs_gives_one_checkpoint_and_one_fid() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path(), 6);
    let a = run(&dsr_config(&root, 0, 0), &tmp.path().join("run")).unwrap();
    assert_eq!(a.checkpoints.len(), 1);
    assert_eq!(FidReport::read_csv(&a.fid).unwrap().len(), 1);
    let ck = ModelCheckpoint::load(&a.checkpoints[0]).unwrap();
    assert_eq!((ck.pipeline.as_str(), ck.epoch), ("dsr", 0));
}

#[test]
fn tbgan_runs_are_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path(), 8);
    let cfg = tbgan_config(&root, 3);
    let a = run(&cfg, &tmp.path().join("a")).unwrap();
    let b = run(&cfg, &tmp.path().join("b")).unwrap();
    assert_eq!(data_lines(&a.traces), data_lines(&b.traces));
    assert_eq!(fs::read(&a.fid).unwrap(), fs::read(&b.fid).unwrap());
    let ca = ModelCheckpoint::load(a.final_checkpoint().unwrap()).unwrap();
    let cb = ModelCheckpoint::load(b.final_checkpoint().unwrap()).unwrap();
    assert_eq!(ca.arrays, cb.arrays);
    assert_eq!(ca.aux, cb.aux);

    let mut resumed = cfg.clone();
    resumed.resume = Some(a.checkpoints[1].clone());
    let r = run(&resumed, &tmp.path().join("r")).unwrap();
    let cr = ModelCheckpoint::load(r.final_checkpoint().unwrap()).unwrap();
    assert_eq!(cr.epoch, 3);
    assert_eq!(cr.arrays, ca.arrays);
    assert_eq!(data_lines(&r.traces)[1..], data_lines(&a.traces)[2..]);

    let (sa, sb) = (tmp.path().join("sa"), tmp.path().join("sb"));
    synthesize(a.final_checkpoint().unwrap(), 4, 1, false, None, &sa).unwrap();
    synthesize(b.final_checkpoint().unwrap(), 4, 1, false, None, &sb).unwrap();
    assert_eq!(file_bytes(&sa), file_bytes(&sb));

    // finetuning from the pretrained weights on another config
    let mut fine = tbgan_config(&root, 1);
    fine.tbgan.init_checkpoint = Some(a.final_checkpoint().unwrap().to_path_buf());
    run(&fine, &tmp.path().join("fine")).unwrap();
    fine.tbgan.preset = "standard".into();
    fine.tbgan.resolution = Some(16);
    assert!(matches!(run(&fine, &tmp.path().join("bad")), Err(Error::ConfigMismatch { .. })));
}

#[test]
fn resume_rejects_other_architecture_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path(), 6);
    let a = run(&tbgan_config(&root, 1), &tmp.path().join("a")).unwrap();
    let mut other = tbgan_config(&root, 2);
    other.seed = Some(4);
    other.resume = Some(a.checkpoints[0].clone());
    assert!(matches!(run(&other, &tmp.path().join("b")), Err(Error::ConfigMismatch { .. })));
    let mut dsr = dsr_config(&root, 1, 1);
    dsr.resume = Some(a.checkpoints[0].clone());
    assert!(matches!(run(&dsr, &tmp.path().join("c")), Err(Error::ConfigMismatch { .. })));
}

#[test]
fn failed_runs_leave_an_error_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("empty");
    fs::create_dir_all(&root).unwrap();
    let out = tmp.path().join("run");
    let err = run(&tbgan_config(&root, 1), &out).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset { .. }), "{err}");
    let report = fs::read_to_string(out.join("error_report.txt")).unwrap();
    assert!(report.contains("config.toml"), "{report}");
}
