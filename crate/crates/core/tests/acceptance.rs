//! Acceptance suite: one PASS/FAIL line per criterion with its runtime.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p usgen-core --test acceptance -- 5 7`.

use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use usgen_core::batch::normalize_u8;
use usgen_core::checkpoint::ModelCheckpoint;
use usgen_core::config::TrainConfig;
use usgen_core::dataset::Unit;
use usgen_core::diffusion::{build_schedule, q_sample, DiffusionSchedule, DiffusionTrainConfig, DiffusionTrainer, UNetConfig};
use usgen_core::imageops::{compute_cdf, downsample2_bicubic, histogram_match, IntensityCdf};
use usgen_core::metrics::{fid, frechet_distance, gaussian_stats, FeatureExtractor, GaussianStats};
use usgen_core::nn::ParamBuilder;
use usgen_core::phantom::{phantom_batch, write_phantoms};
use usgen_core::superres::{sr_generate, SrConfig, SrTrainConfig, SrTrainer};
use usgen_core::tbgan::{apa_update, window_attention, window_attention_probs, APAState, AttentionWeights, DiffAugParams, DiffAugPolicy, TbGanConfig, TbGanTrainConfig, TbGanTrainer};
use usgen_core::trainer::{run, sample_diffusion, synthesize};
use usgen_core::ImageBatch;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------- 1

fn diag_stats(mu: &[f64], var: &[f64]) -> GaussianStats {
    GaussianStats {
        mu: DVector::from_row_slice(mu),
        sigma: DMatrix::from_diagonal(&DVector::from_row_slice(var)),
        n: 2,
    }
}

fn diag_fid(mu1: &[f64], v1: &[f64], mu2: &[f64], v2: &[f64]) -> f64 {
    let m: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let s: f64 = v1.iter().zip(v2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    m + s
}

fn criterion_fid() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = r.random_range(2..=64);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mu1, v1, mu2, v2) = (draw(-2.0, 2.0), draw(0.05, 3.0), draw(-2.0, 2.0), draw(0.05, 3.0));
        let got = frechet_distance(&diag_stats(&mu1, &v1), &diag_stats(&mu2, &v2)).map_err(|e| e.to_string())?;
        worst = worst.max(rel(got, diag_fid(&mu1, &v1, &mu2, &v2)));
    }
    if worst >= 1e-6 {
        return Err(format!("diagonal identity worst relative error {worst:.2e}"));
    }

    let d = 8;
    let mu1: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
    let mu2: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 + if i % 2 == 0 { 0.5 } else { -0.3 }).collect();
    let v1: Vec<f64> = (0..d).map(|i| 0.5 + 0.1 * i as f64).collect();
    let v2: Vec<f64> = (0..d).map(|i| 1.5 - 0.1 * i as f64).collect();
    let mut sample = |mu: &[f64], var: &[f64]| -> Vec<Vec<f64>> {
        (0..10_000)
            .map(|_| mu.iter().zip(var).map(|(m, v)| Normal::new(*m, v.sqrt()).unwrap().sample(&mut r)).collect())
            .collect()
    };
    let (a, b) = (sample(&mu1, &v1), sample(&mu2, &v2));
    let mc = frechet_distance(&gaussian_stats(&a).map_err(|e| e.to_string())?, &gaussian_stats(&b).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let analytic = diag_fid(&mu1, &v1, &mu2, &v2);
    ensure(
        rel(mc, analytic) < 0.05,
        format!("diagonal worst rel {worst:.1e}; Monte-Carlo {mc:.4} vs analytic {analytic:.4} (rel {:.3})", rel(mc, analytic)),
    )
}

// ---------------------------------------------------------------- 2

/// Maps level v to the smallest reference level r with
/// F_ref(r) >= F_src(v), comparing counts as exact integer fractions.
fn brute_force_match(src: &[u8], ref_counts: &[u64; 256]) -> Vec<u8> {
    let n = src.len() as u64;
    let total: u64 = ref_counts.iter().sum();
    src.iter()
        .map(|&v| {
            let below = src.iter().filter(|&&u| u <= v).count() as u64;
            let mut acc = 0u64;
            for (r, &c) in ref_counts.iter().enumerate() {
                acc += c;
                if acc * n >= below * total {
                    return r as u8;
                }
            }
            255
        })
        .collect()
}

fn criterion_histogram() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        // narrow ranges make ties and empty levels common
        let lo = r.random_range(0..200u32);
        let span = r.random_range(1..=56u32);
        let src: Vec<u8> = (0..16).map(|_| (lo + r.random_range(0..span)) as u8).collect();
        let mut counts = [0u64; 256];
        let ref_lo = r.random_range(0..240usize);
        for _ in 0..r.random_range(1..40) {
            counts[(ref_lo + r.random_range(0..16)).min(255)] += r.random_range(1..5);
        }
        let reference = IntensityCdf::from_counts(&counts).map_err(|e| e.to_string())?;
        let batch = ImageBatch::new([1, 1, 4, 4], src.iter().map(|&v| normalize_u8(v)).collect()).map_err(|e| e.to_string())?;
        let once = histogram_match(&batch, &reference).map_err(|e| e.to_string())?;
        let got = once.to_levels(0);
        let want = brute_force_match(&src, &counts);
        if got != want {
            return Err(format!("case {case}: {got:?} != brute force {want:?}"));
        }
        let twice = histogram_match(&once, &reference).map_err(|e| e.to_string())?;
        if twice != once {
            return Err(format!("case {case}: not idempotent"));
        }
        for i in 0..16 {
            for j in 0..16 {
                if src[i] <= src[j] && got[i] > got[j] {
                    return Err(format!("case {case}: order of pixels {i}, {j} reversed"));
                }
            }
        }
        // the source CDF is unchanged when matching to itself
        let own = compute_cdf(batch.plane(0, 0)).map_err(|e| e.to_string())?;
        if histogram_match(&batch, &own).map_err(|e| e.to_string())?.to_levels(0) != src {
            return Err(format!("case {case}: self-matching moved pixels"));
        }
    }
    Ok("50 cases equal brute force; idempotent and monotone".into())
}

// ---------------------------------------------------------------- 3

fn criterion_diffusion() -> Check {
    let e = |x: usgen_core::Error| x.to_string();
    let s = build_schedule(1000, 1e-4, 0.02).map_err(e)?;
    let ab = s.alpha_bar();
    if !ab.windows(2).all(|w| w[1] < w[0]) {
        return Err("alpha_bar not strictly decreasing".into());
    }
    let mut cum = 1.0f64;
    for k in 0..1000 {
        cum *= 1.0 - (1e-4 + (0.02 - 1e-4) * k as f64 / 999.0);
    }
    let last = ab[999];
    if rel(last, cum) >= 1e-3 || !(3.5e-5..4.5e-5).contains(&last) {
        return Err(format!("alpha_bar_T {last:.4e} vs cumulative product {cum:.4e}"));
    }

    let dev = Device::Cpu;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let n = 6 * 1 * 8 * 8;
    let x0: Vec<f32> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let eps: Vec<f32> = (0..n).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut r)).collect();
    let ts = [0usize, 1, 250, 500, 998, 999];
    let xt = q_sample(
        &Tensor::from_vec(x0.clone(), (6, 1, 8, 8), &dev).map_err(|x| x.to_string())?,
        &ts,
        &Tensor::from_vec(eps.clone(), (6, 1, 8, 8), &dev).map_err(|x| x.to_string())?,
        &s,
    )
    .map_err(e)?
    .flatten_all()
    .and_then(|t| t.to_vec1::<f32>())
    .map_err(|x| x.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, &got) in xt.iter().enumerate() {
        let a = ab[ts[i / 64]];
        let want = a.sqrt() * x0[i] as f64 + (1.0 - a).sqrt() * eps[i] as f64;
        worst = worst.max((got as f64 - want).abs() / want.abs().max(1.0));
    }
    if worst > 4.0 * f32::EPSILON as f64 {
        return Err(format!("q_sample error {worst:.2e} exceeds f32 machine precision"));
    }

    // variance law: x_t | x_0 ~ N(sqrt(ab) x_0, 1 - ab)
    let m = 10_000;
    let c = 0.7f32;
    let mut laws = Vec::new();
    for &t in &[50usize, 300, 700] {
        let noise: Vec<f32> = (0..m).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut r)).collect();
        let x = q_sample(
            &Tensor::full(c, (m, 1, 1, 1), &dev).map_err(|x| x.to_string())?,
            &vec![t; m],
            &Tensor::from_vec(noise, (m, 1, 1, 1), &dev).map_err(|x| x.to_string())?,
            &s,
        )
        .map_err(e)?
        .flatten_all()
        .and_then(|t| t.to_vec1::<f32>())
        .map_err(|x| x.to_string())?;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let (want_mean, want_var) = (ab[t].sqrt() * c as f64, 1.0 - ab[t]);
        if rel(var, want_var) > 0.1 || (mean - want_mean).abs() > 0.1 * want_mean.abs().max(want_var.sqrt()) {
            return Err(format!("t={t}: mean {mean:.4} var {var:.4}, expected {want_mean:.4} {want_var:.4}"));
        }
        laws.push(format!("t={t} var rel {:.3}", rel(var, want_var)));
    }
    Ok(format!("alpha_bar_T {last:.4e}; q_sample err {worst:.1e}; {}", laws.join(", ")))
}

// ---------------------------------------------------------------- 4

fn naive_attention(x: &Tensor, w: &AttentionWeights) -> Vec<f64> {
    let (b, h, wd, c) = x.dims4().unwrap();
    let l = h * wd;
    let hd = c / w.heads;
    let qkv: Vec<f64> = w.qkv.forward(x).unwrap().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
    let mut pre = vec![0f32; b * l * c];
    for bi in 0..b {
        for hh in 0..w.heads {
            for i in 0..l {
                let at = |tok: usize, part: usize, d: usize| qkv[(bi * l + tok) * 3 * c + part * c + hh * hd + d];
                let scores: Vec<f64> = (0..l)
                    .map(|j| (0..hd).map(|d| at(i, 0, d) * at(j, 1, d)).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for d in 0..hd {
                    pre[(bi * l + i) * c + hh * hd + d] = (0..l).map(|j| ex[j] / z * at(j, 2, d)).sum::<f64>() as f32;
                }
            }
        }
    }
    let pre = Tensor::from_vec(pre, (b, h, wd, c), x.device()).unwrap();
    w.proj.forward(&pre).unwrap().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn criterion_attention() -> Check {
    let dev = Device::Cpu;
    let s = |x: candle_core::Error| x.to_string();
    let mut worst: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    for (seed, (size, dim, heads)) in [(8usize, 16usize, 2usize), (4, 32, 4), (8, 8, 2)].into_iter().enumerate() {
        let mut b = ParamBuilder::new(dev.clone(), seed as u64, "acceptance-attention");
        let w = AttentionWeights::new(&mut b, "a", dim, heads).map_err(|e| e.to_string())?;
        let mut r = ChaCha8Rng::seed_from_u64(seed as u64);
        let v: Vec<f32> = (0..2 * size * size * dim).map(|_| r.random_range(-1.5..1.5)).collect();
        let x = Tensor::from_vec(v, (2, size, size, dim), &dev).map_err(s)?;
        let got: Vec<f64> = window_attention(&x, size, 0, &w)
            .map_err(|e| e.to_string())?
            .flatten_all()
            .and_then(|t| t.to_dtype(DType::F64))
            .and_then(|t| t.to_vec1())
            .map_err(s)?;
        let want = naive_attention(&x, &w);
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        // smaller windows, shifted and not
        for (win, shift) in [(size / 2, 0), (size / 2, size / 4)] {
            let p = window_attention_probs(&x, win, shift, &w).map_err(|e| e.to_string())?;
            let sums: Vec<f32> = p.sum(3).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1()).map_err(s)?;
            worst_row = worst_row.max(sums.iter().map(|&v| (v as f64 - 1.0).abs()).fold(0.0, f64::max));
        }
    }
    if worst >= 1e-5 || worst_row > 1e-6 {
        return Err(format!("window vs full max diff {worst:.2e}; row-sum error {worst_row:.2e}"));
    }

    // DiffAug gradient against central differences, float64
    let shape = (2, 3, 16, 16);
    let n = 2 * 3 * 256;
    let mut r = ChaCha8Rng::seed_from_u64(44);
    let base: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let probe = Tensor::from_vec((0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(), shape, &dev).map_err(s)?;
    let params = DiffAugParams::sample(&DiffAugPolicy::default(), 2, 16, 16, 9).map_err(|e| e.to_string())?;
    let f = |x: &Tensor| -> Tensor { (params.apply(x).unwrap() * &probe).unwrap().sqr().unwrap().sum_all().unwrap() };
    let xv = Var::from_vec(base.clone(), shape, &dev).map_err(s)?;
    let g: Vec<f64> = f(&xv)
        .backward()
        .map_err(s)?
        .get(&xv)
        .ok_or("no gradient reached the input")?
        .flatten_all()
        .and_then(|t| t.to_vec1())
        .map_err(s)?;
    let eps = 1e-5;
    let mut worst_fd: f64 = 0.0;
    let mut checked = 0;
    for i in (0..n).step_by(5) {
        let (mut p, mut m) = (base.clone(), base.clone());
        p[i] += eps;
        m[i] -= eps;
        let fp: f64 = f(&Tensor::from_vec(p, shape, &dev).map_err(s)?).to_scalar().map_err(s)?;
        let fm: f64 = f(&Tensor::from_vec(m, shape, &dev).map_err(s)?).to_scalar().map_err(s)?;
        let fd = (fp - fm) / (2.0 * eps);
        if g[i].abs().max(fd.abs()) > 1e-6 {
            worst_fd = worst_fd.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()));
            checked += 1;
        }
    }
    ensure(
        worst_fd < 1e-3 && checked > 100,
        format!("window vs full {worst:.1e}; row sums {worst_row:.1e}; DiffAug FD rel {worst_fd:.1e} over {checked} coordinates"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_toy_dsr() -> Check {
    let e = |x: usgen_core::Error| x.to_string();
    let dev = Device::Cpu;
    let high = phantom_batch(64, 64, 21).map_err(e)?;
    let low = downsample2_bicubic(&high);
    let schedule = DiffusionSchedule::linear(50, 0.002, 0.4).map_err(e)?;
    let mut diff = DiffusionTrainer::new(
        UNetConfig::tiny(32, 1),
        schedule.clone(),
        DiffusionTrainConfig {
            units: 200,
            unit: Unit::Epoch,
            batch_size: 16,
            lr: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 5,
            augment: None,
        },
        &dev,
    )
    .map_err(e)?;
    let untrained_low = sample_diffusion(diff.model(), &schedule, 64, 1, 32, 77).map_err(e)?;
    let rows = diff.train(&low, |_, _| Ok(())).map_err(e)?;
    let (d0, d1) = (rows[0].mean_loss, rows[rows.len() - 1].mean_loss);
    let trained_low = sample_diffusion(diff.model(), &schedule, 64, 1, 32, 77).map_err(e)?;

    let mut counts = [0u64; 256];
    for &v in low.data() {
        counts[usgen_core::imageops::quantize(v) as usize] += 1;
    }
    let reference = IntensityCdf::from_counts(&counts).map_err(e)?;
    let untrained_low = histogram_match(&untrained_low, &reference).map_err(e)?;
    let trained_low = histogram_match(&trained_low, &reference).map_err(e)?;

    let mut sr = SrTrainer::new(
        SrConfig::tiny(1),
        SrTrainConfig {
            units: 300,
            unit: Unit::Step,
            batch_size: 8,
            lr_generator: 1e-3,
            lr_discriminator: 1e-4,
            adam_betas: (0.9, 0.999),
            lambda_adv: 1e-3,
            feature_content: false,
            seed: 6,
            augment: None,
        },
        &dev,
    )
    .map_err(e)?;
    let c0 = sr.evaluate_content(&high).map_err(e)?;
    let untrained = sr_generate(sr.generator(), &untrained_low).map_err(e)?;
    sr.train(&high, |_, _| Ok(())).map_err(e)?;
    let c1 = sr.evaluate_content(&high).map_err(e)?;
    let trained = sr_generate(sr.generator(), &trained_low).map_err(e)?;

    let ex = FeatureExtractor::tiny().map_err(e)?;
    let f0 = fid(&high, &untrained, &ex, None, 1, 0, "untrained").map_err(e)?.fid;
    let f1 = fid(&high, &trained, &ex, None, 1, 0, "trained").map_err(e)?.fid;
    let detail = format!(
        "diffusion loss {d0:.4} -> {d1:.4} ({:.2}x); SR content {c0:.4} -> {c1:.4} ({:.2}x); FID untrained {f0:.3} -> trained {f1:.3} ({:.0}% lower)",
        d1 / d0,
        c1 / c0,
        100.0 * (1.0 - f1 / f0)
    );
    ensure(d1 < 0.5 * d0 && c1 < 0.5 * c0 && f1 <= 0.7 * f0, detail)
}

// ---------------------------------------------------------------- 6

fn criterion_toy_tbgan() -> Check {
    let e = |x: usgen_core::Error| x.to_string();
    let base = APAState::new(8, 0.6, 4000.0).map_err(e)?;
    // fixed point: lambda at target and a batch whose sign mean equals it
    let fixed = APAState { p: 0.3, lambda_r: 0.6, ..base };
    let logits = [1.0, 2.0, 0.5, 3.0, 1.5, 0.1, 0.2, 4.0, -1.0, -2.0];
    if apa_update(&fixed, &logits) != fixed {
        return Err(format!("fixed point moved: {:?}", apa_update(&fixed, &logits)));
    }
    let top = APAState { p: 1.0, lambda_r: 0.9, ..base };
    let bottom = APAState { p: 0.0, lambda_r: -0.5, ..base };
    let near = APAState { p: 0.999, lambda_r: 0.9, step_size: 0.01, ..base };
    if apa_update(&top, &[1.0; 8]).p != 1.0 || apa_update(&bottom, &[-1.0; 8]).p != 0.0 || apa_update(&near, &[1.0; 8]).p != 1.0 {
        return Err("clamp cases failed".into());
    }

    let reals = phantom_batch(64, 32, 31).map_err(e)?;
    let mut cfg = TbGanTrainConfig {
        unit: Unit::Step,
        apa_traverse_images: 4000.0,
        ..TbGanTrainConfig::with_defaults(500, 8, 13)
    };
    cfg.policy = DiffAugPolicy::default();
    cfg.apa = true;
    let mut t = TbGanTrainer::new(TbGanConfig::tiny(1), cfg, &Device::Cpu).map_err(e)?;
    let mut bad = None;
    let (mut p_lo, mut p_hi) = (f64::MAX, f64::MIN);
    let rows = t
        .train(&reals, |_, row| {
            p_lo = p_lo.min(row.apa_p);
            p_hi = p_hi.max(row.apa_p);
            let finite = row.g_loss.is_finite() && row.d_loss.is_finite() && row.r1.is_finite();
            if bad.is_none() && (!finite || !(0.0..=1.0).contains(&row.apa_p)) {
                bad = Some(format!("step {}: {row:?}", row.epoch));
            }
            Ok(())
        })
        .map_err(e)?;
    if let Some(b) = bad {
        return Err(b);
    }
    let last = &rows[rows.len() - 1];
    ensure(
        rows.len() == 500,
        format!(
            "500 steps finite; p in [{p_lo:.3}, {p_hi:.3}]; final g {:.3} d {:.3}; APA fixed point and clamps exact",
            last.g_loss, last.d_loss
        ),
    )
}

// ---------------------------------------------------------------- 7

fn trace_without_time(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(h, _)| h).to_string())
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map(|d| d.filter_map(|e| e.ok()).map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap_or_default())).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn toy_config(pipeline: &str, root: &Path) -> TrainConfig {
    let common = format!(
        "pipeline = \"{pipeline}\"\nplane = \"other\"\ndata_root = {root:?}\nepochs = 3\nbatch_size = 4\n\
         lr_generator = 1e-4\nlr_discriminator = 1e-4\nadam_betas = [0.5, 0.99]\nseed = 17\n\
         eval_every = 1\ncheckpoint_every = 1\neval_samples = 4\n"
    );
    let section = match pipeline {
        "dsr" => "[dsr]\nunet = \"tiny\"\nsr = \"tiny\"\nlow_resolution = 16\ntimesteps = 10\nbeta_start = 0.01\nbeta_end = 0.3\nsr_epochs = 3\n",
        _ => "[tbgan]\npreset = \"tiny\"\nresolution = 16\napa_traverse_images = 200.0\n",
    };
    TrainConfig::from_toml(&format!("{common}{section}"), &[]).expect("toy config")
}

fn criterion_reproducibility() -> Check {
    let e = |x: usgen_core::Error| x.to_string();
    let tmp = tempfile::tempdir().map_err(|x| x.to_string())?;
    let root = tmp.path().join("data");
    write_phantoms(&root, 12, 32, 8).map_err(e)?;
    let mut notes = Vec::new();
    for pipeline in ["dsr", "tbgan"] {
        let cfg = toy_config(pipeline, &root);
        let a = run(&cfg, &tmp.path().join(format!("{pipeline}-a"))).map_err(e)?;
        let b = run(&cfg, &tmp.path().join(format!("{pipeline}-b"))).map_err(e)?;
        let mut traces = vec![(a.traces.clone(), b.traces.clone())];
        if let (Some(x), Some(y)) = (&a.diffusion_traces, &b.diffusion_traces) {
            traces.push((x.clone(), y.clone()));
        }
        for (x, y) in &traces {
            if trace_without_time(x) != trace_without_time(y) {
                return Err(format!("{pipeline}: traces differ ({})", x.display()));
            }
        }
        if fs::read(&a.fid).ok() != fs::read(&b.fid).ok() {
            return Err(format!("{pipeline}: FID records differ"));
        }
        let (fa, fb) = (a.final_checkpoint().ok_or("no checkpoint")?, b.final_checkpoint().ok_or("no checkpoint")?);
        let (sa, sb) = (tmp.path().join(format!("{pipeline}-sa")), tmp.path().join(format!("{pipeline}-sb")));
        let cdf = a.reference_cdf.as_ref().map(|p| IntensityCdf::read_tsv(p)).transpose().map_err(e)?;
        synthesize(fa, 4, 3, cdf.is_some(), cdf.as_ref(), &sa).map_err(e)?;
        synthesize(fb, 4, 3, cdf.is_some(), cdf.as_ref(), &sb).map_err(e)?;
        if dir_bytes(&sa) != dir_bytes(&sb) || dir_bytes(&sa).len() != 5 {
            return Err(format!("{pipeline}: synthesized files differ"));
        }
        let straight = ModelCheckpoint::load(fa).map_err(e)?;
        // resume from every intermediate checkpoint
        for (k, ck) in a.checkpoints[..a.checkpoints.len() - 1].iter().enumerate() {
            let mut rc = cfg.clone();
            rc.resume = Some(ck.clone());
            let r = run(&rc, &tmp.path().join(format!("{pipeline}-r{k}"))).map_err(e)?;
            let resumed = ModelCheckpoint::load(r.final_checkpoint().ok_or("no checkpoint")?).map_err(e)?;
            if resumed.arrays != straight.arrays || resumed.aux != straight.aux || resumed.epoch != straight.epoch {
                return Err(format!("{pipeline}: resume from {} diverges", ck.display()));
            }
        }
        notes.push(format!("{pipeline}: {} resume points", a.checkpoints.len() - 1));
    }
    Ok(format!("traces, FID records and synthesized PNGs bit-identical; {}", notes.join(", ")))
}

// ---------------------------------------------------------------- 8

fn criterion_defaults() -> Check {
    let dsr = TrainConfig::default_dsr("data");
    let gan = TrainConfig::default_tbgan("data");
    let fine = TrainConfig::default_tbgan_finetune("data", "pre.ckpt");
    let arch = gan.tbgan.architecture(1).map_err(|e| e.to_string())?;
    let checks = [
        ("TTUR discriminator 1e-4", gan.lr_discriminator == 1e-4 && fine.lr_discriminator == 1e-4),
        ("TTUR generator 1e-5", gan.lr_generator == 1e-5 && fine.lr_generator == 1e-5),
        ("DSR diffusion epochs 10000", dsr.epochs == 10_000),
        ("DSR SR epochs 200", dsr.dsr.sr_epochs == 200),
        ("TB-GAN 500 pretraining epochs", gan.epochs == 500),
        ("TB-GAN 200 finetuning epochs", fine.epochs == 200 && fine.tbgan.init_checkpoint.is_some()),
        ("diffusion at 128", dsr.dsr.low_resolution == 128),
        ("SR to 256", dsr.dsr.high_resolution() == 256),
        ("TB-GAN at 256", arch.resolution == 256),
        ("diffusion schedule 1000 steps 1e-4..0.02", dsr.dsr.timesteps == 1000 && dsr.dsr.beta_start == 1e-4 && dsr.dsr.beta_end == 0.02),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    ensure(failed.is_empty(), if failed.is_empty() { format!("{} protocol values", checks.len()) } else { format!("wrong: {}", failed.join(", ")) })
}

// ----------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, f64, fn() -> Check); 8] = [
        (1, "FID oracle", 30.0, criterion_fid),
        (2, "histogram matching oracle", 5.0, criterion_histogram),
        (3, "diffusion closed forms", 30.0, criterion_diffusion),
        (4, "attention equivalence and DiffAug gradient", 60.0, criterion_attention),
        (5, "toy DSR pipeline", 1200.0, criterion_toy_dsr),
        (6, "toy TB-GAN", 900.0, criterion_toy_tbgan),
        (7, "reproducibility and resume", 600.0, criterion_reproducibility),
        (8, "default protocol configs", 1.0, criterion_defaults),
    ];
    let mut failures = 0;
    for (n, name, budget, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget} s budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!("{} {n}. {name}: {detail} [{secs:.1} s / {budget} s]", if ok { "PASS" } else { "FAIL" });
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
