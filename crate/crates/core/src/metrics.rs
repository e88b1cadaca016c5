//! Fréchet distance between Gaussian fits of image feature embeddings.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::batch::ImageBatch;
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::imageops::resize_batch;
use crate::nn::{self, Conv2d, Init, ParamBuilder, ParamStore};
use crate::rng;

const EXTRACTOR_SEED: u64 = 0x5eed_f1d0;

/// Fixed convolutional encoder mapping single-channel images to a feature
/// vector by global average pooling.
pub struct FeatureExtractor {
    params: ParamStore,
    convs: Vec<Conv2d>,
    input_size: usize,
    feature_dim: usize,
    checksum: String,
}

impl FeatureExtractor {
    /// Widths of the bundled encoder's convolution stages.
    const TINY_WIDTHS: [usize; 4] = [16, 32, 64, 64];

    /// The bundled fixed-seed encoder: 64×64 input, 64 features.
    pub fn tiny() -> Result<Self> {
        Self::build(&Self::TINY_WIDTHS, None)
    }

    /// Encoder with the bundled architecture and weights read from a
    /// checkpoint file (pipeline tag `extractor`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let ckpt = ModelCheckpoint::load(path)?;
        ckpt.check_pipeline("extractor")?;
        let widths: Vec<usize> = serde_json::from_value(ckpt.architecture["widths"].clone())
            .map_err(|e| Error::Format {
                what: "extractor architecture",
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        Self::build(&widths, Some(&ckpt))
    }

    /// `tiny` or a path to an extractor checkpoint.
    pub fn by_name(name: &str) -> Result<Self> {
        if name == "tiny" {
            Self::tiny()
        } else {
            Self::from_file(Path::new(name))
        }
    }

    fn build(widths: &[usize], weights: Option<&ModelCheckpoint>) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("extractor needs at least one stage".into()));
        }
        let mut b = ParamBuilder::new(Device::Cpu, EXTRACTOR_SEED, "feature-extractor");
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            let init = Init::FanIn { fan_in: cin * 9, gain: 2f32.sqrt() };
            convs.push(Conv2d::with_init(&mut b, &format!("conv{i}"), cin, w, 3, 1, init)?);
            cin = w;
        }
        let params = b.finish();
        if let Some(ckpt) = weights {
            params.import(&ckpt.arrays, "")?;
        }
        let mut h = Sha256::new();
        for (name, a) in params.export("")? {
            h.update(name.as_bytes());
            for d in &a.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &a.data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(Self {
            params,
            convs,
            input_size: 64,
            feature_dim: cin,
            checksum: hex::encode(h.finalize()),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Differentiable features of an (N, C, H, W) tensor; channels are
    /// averaged to one. Any spatial size divisible by 2^(stages−1) works.
    pub fn features_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let mut h = if c == 1 { x.clone() } else { x.mean_keepdim(1)? };
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = nn::avg_pool2(&h)?;
            }
            h = nn::leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        Ok(h.mean((2, 3))?)
    }

    /// Feature rows for every image, resizing to the encoder's input size.
    pub fn extract(&self, batch: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        if batch.count() == 0 {
            return Err(Error::InvalidArgument("cannot extract features of an empty batch".into()));
        }
        let sized;
        let batch = if batch.height() != self.input_size || batch.width() != self.input_size {
            sized = resize_batch(batch, self.input_size, self.input_size);
            &sized
        } else {
            batch
        };
        let mut rows = Vec::with_capacity(batch.count());
        let idx: Vec<usize> = (0..batch.count()).collect();
        for chunk in idx.chunks(32) {
            let f = self.features_tensor(&batch.select(chunk).to_tensor(&Device::Cpu)?)?;
            for row in f.to_vec2::<f32>()? {
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        format!("feature extraction (extractor {})", self.checksum),
                        "non-finite feature",
                    ));
                }
                rows.push(row.into_iter().map(f64::from).collect());
            }
        }
        Ok(rows)
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Column means and covariance (divisor n − 1, symmetrised). Rows are
/// sorted first so the result does not depend on their order.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 feature rows, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows must share a nonzero length".into()));
    }
    let mut rows: Vec<&Vec<f64>> = features.iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let sigma = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma, n })
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// tr((Σ₁Σ₂)^½) evaluated as tr((√Σ₁ Σ₂ √Σ₁)^½), which shares its
/// eigenvalues and stays symmetric.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let r1 = psd_sqrt(s1)?;
    let inner = &r1 * s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(inner, f64::EPSILON, 0)?;
    let t: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    t.is_finite().then_some(t)
}

/// ‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½), clamped to ≥ 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.shape() != b.sigma.shape() {
        return Err(Error::Shape(format!("feature dims {} and {} differ", a.dim(), b.dim())));
    }
    let diff = (&a.mu - &b.mu).norm_squared();
    let d = a.dim();
    let mut attempts = Vec::new();
    for jitter in [0.0, 1e-6] {
        let eye = DMatrix::<f64>::identity(d, d) * jitter;
        let s1 = &a.sigma + &eye;
        let s2 = &b.sigma + &eye;
        match trace_sqrt_product(&s1, &s2) {
            Some(t) => {
                let v = diff + s1.trace() + s2.trace() - 2.0 * t;
                if v.is_finite() {
                    return Ok(v.max(0.0));
                }
                attempts.push(format!("jitter {jitter:e}: distance {v}"));
            }
            None => attempts.push(format!("jitter {jitter:e}: eigendecomposition failed")),
        }
    }
    Err(Error::numeric("frechet distance", attempts.join("; ")))
}

/// One FID evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FidReport {
    pub epoch: u64,
    pub model_tag: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub feature_dim: usize,
    pub extractor_checksum: String,
    pub fid: f64,
}

impl FidReport {
    pub const HEADER: &'static str = "epoch,model_tag,n_real,n_fake,feature_dim,extractor_checksum,fid";
    /// Leading comment line of every FID file.
    pub const COMMENT: &'static str = "# epoch counts training epochs (or steps when the run is step-based)";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.model_tag, self.n_real, self.n_fake, self.feature_dim, self.extractor_checksum, self.fid
        )
    }

    /// Parses one data row.
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed FID row {line:?}"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            model_tag: f[1].to_string(),
            n_real: f[2].parse().map_err(|_| bad())?,
            n_fake: f[3].parse().map_err(|_| bad())?,
            feature_dim: f[4].parse().map_err(|_| bad())?,
            extractor_checksum: f[5].to_string(),
            fid: f[6].parse().map_err(|_| bad())?,
        })
    }

    /// Appends to `path`, writing the comment and header when the file is new.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(Self::COMMENT);
            text.push('\n');
            text.push_str(Self::HEADER);
            text.push('\n');
        }
        text.push_str(&self.csv());
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<Self>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty() && *l != Self::HEADER)
            .map(Self::parse)
            .collect()
    }
}

/// FID between a seed-selected subset of `real` (all of it when
/// `sample_count` is `None`) and every image in `fake`.
pub fn fid(
    real: &ImageBatch,
    fake: &ImageBatch,
    extractor: &FeatureExtractor,
    sample_count: Option<usize>,
    seed: u64,
    epoch: u64,
    model_tag: &str,
) -> Result<FidReport> {
    if real.count() < 2 || fake.count() < 2 {
        return Err(Error::InvalidArgument(format!(
            "FID needs at least 2 images per side (real {}, fake {})",
            real.count(),
            fake.count()
        )));
    }
    let mut idx: Vec<usize> = (0..real.count()).collect();
    if let Some(k) = sample_count.filter(|&k| k < real.count()) {
        idx.shuffle(&mut rng::stream(seed, "fid-real-subset", 0));
        idx.truncate(k.max(2));
        idx.sort_unstable();
    }
    let subset = real.select(&idx);
    let a = gaussian_stats(&extractor.extract(&subset)?)?;
    let b = gaussian_stats(&extractor.extract(fake)?)?;
    Ok(FidReport {
        epoch,
        model_tag: model_tag.to_string(),
        n_real: subset.count(),
        n_fake: fake.count(),
        feature_dim: extractor.feature_dim(),
        extractor_checksum: extractor.checksum().to_string(),
        fid: frechet_distance(&a, &b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], sigma_diag: &[f64]) -> GaussianStats {
        GaussianStats {
            mu: DVector::from_row_slice(mu),
            sigma: DMatrix::from_diagonal(&DVector::from_row_slice(sigma_diag)),
            n: 10,
        }
    }

    #[test]
    fn two_point_stats() {
        let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
        let z = gaussian_stats(&vec![vec![1.0, 3.0]; 4]).unwrap();
        assert!(z.sigma.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn hand_cases() {
        let a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        assert!((frechet_distance(&a, &stats(&[1.0, 1.0], &[1.0, 1.0])).unwrap() - 2.0).abs() < 1e-12);
        assert!((frechet_distance(&stats(&[0.0, 0.0], &[4.0, 4.0]), &a).unwrap() - 2.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &stats(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn singular_covariances_are_handled() {
        let a = gaussian_stats(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let b = gaussian_stats(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!(ab.is_finite() && (ab - ba).abs() < 1e-6);
    }

    #[test]
    fn extractor_is_deterministic_and_order_free() {
        let e = FeatureExtractor::tiny().unwrap();
        assert_eq!(e.feature_dim(), 64);
        assert_eq!(e.checksum(), FeatureExtractor::tiny().unwrap().checksum());
        let data: Vec<f32> = (0..3 * 64 * 64).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let b = ImageBatch::new([3, 1, 64, 64], data).unwrap();
        let r1 = e.extract(&b).unwrap();
        let r2 = e.extract(&b.select(&[0, 0])).unwrap();
        assert_eq!(r1.len(), 3);
        assert_eq!(r2[0], r2[1]);
        assert_eq!(r1[0], r2[0]);
        let f1 = fid(&b, &b.select(&[2, 1, 0]), &e, None, 1, 0, "t").unwrap();
        assert!(f1.fid < 1e-6, "{}", f1.fid);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fid.csv");
        let r = FidReport {
            epoch: 10,
            model_tag: "dsr".into(),
            n_real: 5,
            n_fake: 6,
            feature_dim: 64,
            extractor_checksum: "ab".into(),
            fid: 1.25,
        };
        r.append_to(&p).unwrap();
        r.append_to(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with('#'));
        assert_eq!(FidReport::read_csv(&p).unwrap(), vec![r.clone(), r]);
    }
}
