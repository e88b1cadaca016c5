//! Differentiable augmentation applied to every discriminator input.
//!
//! Each transform is built from additions, products, means and matrix
//! products, so gradients reach both the generator and the image.

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffAugPolicy {
    pub brightness: bool,
    pub saturation: bool,
    pub contrast: bool,
    /// Maximum shift as a fraction of the image side.
    pub translation_ratio: f64,
    /// Side of the erased square as a fraction of the image side.
    pub cutout_ratio: f64,
}

impl Default for DiffAugPolicy {
    fn default() -> Self {
        Self {
            brightness: true,
            saturation: true,
            contrast: true,
            translation_ratio: 0.125,
            cutout_ratio: 0.5,
        }
    }
}

impl DiffAugPolicy {
    /// The identity policy.
    pub fn none() -> Self {
        Self {
            brightness: false,
            saturation: false,
            contrast: false,
            translation_ratio: 0.0,
            cutout_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("translation_ratio", self.translation_ratio), ("cutout_ratio", self.cutout_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

fn rounded(size: usize, ratio: f64) -> usize {
    (size as f64 * ratio + 0.5) as usize
}

/// Per-image transform parameters drawn for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffAugParams {
    /// Additive offsets.
    pub brightness: Option<Vec<f64>>,
    /// Factors on the deviation from the channel mean.
    pub saturation: Option<Vec<f64>>,
    /// Factors on the deviation from the image mean.
    pub contrast: Option<Vec<f64>>,
    /// (dy, dx) shifts with zero fill.
    pub translation: Option<Vec<(i64, i64)>>,
    /// (top, left, side) of the zeroed square.
    pub cutout: Option<Vec<(usize, usize, usize)>>,
}

impl DiffAugParams {
    pub fn identity() -> Self {
        Self {
            brightness: None,
            saturation: None,
            contrast: None,
            translation: None,
            cutout: None,
        }
    }

    pub fn sample(policy: &DiffAugPolicy, n: usize, h: usize, w: usize, seed: u64) -> Result<Self> {
        policy.validate()?;
        let mut r = rng::stream(seed, "diffaug", 0);
        let mut draw = |on: bool, lo: f64, hi: f64| on.then(|| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>());
        let brightness = draw(policy.brightness, -0.5, 0.5);
        let saturation = draw(policy.saturation, 0.0, 2.0);
        let contrast = draw(policy.contrast, 0.5, 1.5);
        let (sy, sx) = (rounded(h, policy.translation_ratio) as i64, rounded(w, policy.translation_ratio) as i64);
        let translation = (sy > 0 || sx > 0)
            .then(|| (0..n).map(|_| (r.random_range(-sy..=sy), r.random_range(-sx..=sx))).collect());
        let side = rounded(h.min(w), policy.cutout_ratio);
        let cutout = (side > 0 && policy.cutout_ratio > 0.0)
            .then(|| (0..n).map(|_| (r.random_range(0..=h - side), r.random_range(0..=w - side), side)).collect());
        Ok(Self {
            brightness,
            saturation,
            contrast,
            translation,
            cutout,
        })
    }

    fn per_image(v: &[f64], x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::from_vec(v.to_vec(), (v.len(), 1, 1, 1), x.device())?.to_dtype(x.dtype())?)
    }

    /// Applies color, then translation, then cutout to an NCHW tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let mut x = x.clone();
        if let Some(b) = &self.brightness {
            x = x.broadcast_add(&Self::per_image(b, &x)?)?;
        }
        if let Some(f) = &self.saturation {
            let m = x.mean_keepdim(1)?;
            x = x.broadcast_sub(&m)?.broadcast_mul(&Self::per_image(f, &x)?)?.broadcast_add(&m)?;
        }
        if let Some(f) = &self.contrast {
            let m = x.reshape((n, c * h * w))?.mean_keepdim(1)?.reshape((n, 1, 1, 1))?;
            x = x.broadcast_sub(&m)?.broadcast_mul(&Self::per_image(f, &x)?)?.broadcast_add(&m)?;
        }
        if let Some(t) = &self.translation {
            // out = S_y · x · S_xᵀ with one-hot shift matrices
            let shift = |size: usize, d: &dyn Fn(usize) -> i64| -> Result<Tensor> {
                let mut m = vec![0f32; n * size * size];
                for i in 0..n {
                    for row in 0..size {
                        let src = row as i64 - d(i);
                        if (0..size as i64).contains(&src) {
                            m[(i * size + row) * size + src as usize] = 1.0;
                        }
                    }
                }
                Ok(Tensor::from_vec(m, (n, 1, size, size), x.device())?
                    .to_dtype(x.dtype())?
                    .broadcast_as((n, c, size, size))?
                    .contiguous()?)
            };
            let sy = shift(h, &|i| t[i].0)?;
            let sx = shift(w, &|i| t[i].1)?;
            x = sy.matmul(&x.contiguous()?)?.matmul(&sx.transpose(2, 3)?.contiguous()?)?;
        }
        if let Some(cut) = &self.cutout {
            let mut m = vec![1f32; n * h * w];
            for (i, &(top, left, side)) in cut.iter().enumerate() {
                for y in top..top + side {
                    for xx in left..left + side {
                        m[(i * h + y) * w + xx] = 0.0;
                    }
                }
            }
            let mask = Tensor::from_vec(m, (n, 1, h, w), x.device())?.to_dtype(x.dtype())?;
            x = x.broadcast_mul(&mask)?;
        }
        Ok(x)
    }
}

/// Tensor form of [`diffaug`] with freshly drawn parameters.
pub fn diffaug_tensor(x: &Tensor, policy: &DiffAugPolicy, seed: u64) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    DiffAugParams::sample(policy, n, h, w, seed)?.apply(x)
}

/// Augments an image batch; the same seed draws the same transforms.
pub fn diffaug(batch: &ImageBatch, policy: &DiffAugPolicy, seed: u64) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty batch".into()));
    }
    ImageBatch::from_tensor(&diffaug_tensor(&batch.to_tensor(&Device::Cpu)?, policy, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Var};

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> ImageBatch {
        let len = n * c * h * w;
        ImageBatch::new([n, c, h, w], (0..len).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()).unwrap()
    }

    #[test]
    fn empty_policy_is_exact_identity() {
        let b = ramp(3, 3, 8, 8);
        assert_eq!(diffaug(&b, &DiffAugPolicy::none(), 4).unwrap(), b);
    }

    #[test]
    fn zero_magnitude_draws_are_identity() {
        let b = ramp(2, 3, 8, 8);
        let x = b.to_tensor(&Device::Cpu).unwrap();
        let p = DiffAugParams {
            brightness: Some(vec![0.0; 2]),
            saturation: Some(vec![1.0; 2]),
            contrast: Some(vec![1.0; 2]),
            translation: Some(vec![(0, 0); 2]),
            cutout: None,
        };
        let y = ImageBatch::from_tensor(&p.apply(&x).unwrap()).unwrap();
        let d = b.data().iter().zip(y.data()).map(|(a, c)| (a - c).abs()).fold(0.0, f32::max);
        assert!(d < 1e-6);
    }

    #[test]
    fn half_cutout_zeroes_one_quarter() {
        let policy = DiffAugPolicy { cutout_ratio: 0.5, ..DiffAugPolicy::none() };
        let ones = ImageBatch::filled([1, 1, 8, 8], 1.0);
        let mut corners = std::collections::BTreeSet::new();
        for seed in 0..20 {
            let y = diffaug(&ones, &policy, seed).unwrap();
            let zeros: Vec<usize> = (0..64).filter(|&i| y.data()[i] == 0.0).collect();
            assert_eq!(zeros.len(), 16);
            assert_eq!(y.data().iter().filter(|&&v| v == 1.0).count(), 48);
            let (top, left) = (zeros[0] / 8, zeros[0] % 8);
            for dy in 0..4 {
                for dx in 0..4 {
                    assert!(zeros.contains(&((top + dy) * 8 + left + dx)));
                }
            }
            corners.insert(zeros[0]);
        }
        assert!(corners.len() > 1);
    }

    #[test]
    fn translation_moves_content_with_zero_fill() {
        let b = ramp(1, 1, 8, 8);
        let x = b.to_tensor(&Device::Cpu).unwrap();
        let p = DiffAugParams { translation: Some(vec![(2, -1)]), ..DiffAugParams::identity() };
        let y = ImageBatch::from_tensor(&p.apply(&x).unwrap()).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let (sr, sc) = (r as i64 - 2, c as i64 + 1);
                let expect = if (0..8).contains(&sr) && (0..8).contains(&sc) {
                    b.data()[sr as usize * 8 + sc as usize]
                } else {
                    0.0
                };
                assert_eq!(y.data()[r * 8 + c], expect);
            }
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let pol = DiffAugPolicy::default();
        let a = DiffAugParams::sample(&pol, 4, 16, 16, 9).unwrap();
        assert_eq!(a, DiffAugParams::sample(&pol, 4, 16, 16, 9).unwrap());
        assert_ne!(a, DiffAugParams::sample(&pol, 4, 16, 16, 10).unwrap());
        assert!(DiffAugParams::sample(&DiffAugPolicy { cutout_ratio: 1.5, ..pol }, 1, 8, 8, 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let shape = (2, 3, 8, 8);
        let n = 2 * 3 * 64;
        let base: Vec<f64> = (0..n).map(|i| ((i * 53 % 97) as f64 / 48.0) - 1.0).collect();
        let probe = Tensor::from_vec((0..n).map(|i| ((i * 31 % 89) as f64 / 44.0) - 1.0).collect::<Vec<_>>(), shape, &Device::Cpu).unwrap();
        let params = DiffAugParams::sample(&DiffAugPolicy::default(), 2, 8, 8, 3).unwrap();
        let f = |x: &Tensor| -> Tensor { (params.apply(x).unwrap() * &probe).unwrap().sum_all().unwrap() };
        let x = Var::from_vec(base.clone(), shape, &Device::Cpu).unwrap();
        assert_eq!(x.dtype(), DType::F64);
        let g = f(&x).backward().unwrap().get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(7) {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += eps;
            m[i] -= eps;
            let fp = f(&Tensor::from_vec(p, shape, &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fm = f(&Tensor::from_vec(m, shape, &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }
}
