//! Denoising diffusion: linear noise schedule, closed-form forward noising,
//! ε-prediction loss and ancestral sampling.

mod train;
mod unet;

pub use train::{DiffusionTrainConfig, DiffusionTraceRow, DiffusionTrainer};
pub use unet::{UNet, UNetConfig};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::rng;

/// Per-timestep noise coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// β linearly interpolated from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < {beta_start} ≤ {beta_end} < 1"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if alpha_bar.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidArgument(
                "cumulative retention underflows to zero".into(),
            ));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {})",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(steps, beta_start, beta_end)
}

/// Anything that predicts the noise component of `x_t` at timesteps `t`.
pub trait NoisePredictor {
    fn predict(&self, x: &Tensor, t: &[usize]) -> Result<Tensor>;
}

fn per_image(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_slice(values, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// `√ᾱ · x0 + √(1−ᾱ) · noise` with one ᾱ per image.
pub fn forward_noise(x0: &Tensor, noise: &Tensor, alpha_bar: &[f64]) -> Result<Tensor> {
    if x0.dims() != noise.dims() {
        return Err(Error::Shape(format!(
            "x0 {:?} and noise {:?} differ",
            x0.dims(),
            noise.dims()
        )));
    }
    let n = x0.dim(0)?;
    if alpha_bar.len() != n {
        return Err(Error::Shape(format!("{} coefficients for {n} images", alpha_bar.len())));
    }
    let signal: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let spread: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok((x0.broadcast_mul(&per_image(&signal, x0)?)?
        + noise.broadcast_mul(&per_image(&spread, x0)?)?)?)
}

/// Closed-form sample of `x_t ~ q(x_t | x0)`.
pub fn q_sample(x0: &Tensor, t: &[usize], noise: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    let ab = t
        .iter()
        .map(|&ti| s.check_t(ti).map(|_| s.alpha_bar[ti]))
        .collect::<Result<Vec<_>>>()?;
    forward_noise(x0, noise, &ab)
}

pub(crate) fn normal_tensor(
    seed: u64,
    label: &str,
    index: u64,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = rng::normal_vec(&mut rng::stream(seed, label, index), n);
    Ok(Tensor::from_vec(v, shape.to_vec(), device)?.to_dtype(dtype)?)
}

/// ε-prediction objective: MSE between the predicted and true noise at
/// timesteps drawn uniformly per image.
pub fn denoise_loss(
    model: &impl NoisePredictor,
    x0: &Tensor,
    s: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor> {
    let n = x0.dim(0)?;
    if x0.elem_count() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut r = rng::stream(seed, "denoise-timesteps", 0);
    let t: Vec<usize> = (0..n).map(|_| r.random_range(0..s.steps())).collect();
    let eps = normal_tensor(seed, "denoise-noise", 0, x0.dims(), x0.dtype(), x0.device())?;
    let xt = q_sample(x0, &t, &eps, s)?;
    let pred = model.predict(&xt, &t)?;
    let loss = nn::mse(&pred, &eps)?;
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::numeric(
            "denoise_loss",
            format!("loss {v} at timesteps {t:?}"),
        ));
    }
    Ok(loss)
}

/// Mean of the reverse transition:
/// `(x_t − β/√(1−ᾱ) · ε̂) / √α`.
pub fn posterior_mean(x_t: &Tensor, eps_pred: &Tensor, beta: f64, alpha_bar: f64) -> Result<Tensor> {
    let alpha = 1.0 - beta;
    let k = beta / (1.0 - alpha_bar).sqrt();
    Ok(((x_t - (eps_pred * k)?)? * (1.0 / alpha.sqrt()))?)
}

/// One ancestral step `x_t → x_{t−1}` with σ² = β; no noise is added at
/// `t = 0`.
pub fn p_sample_step(
    model: &impl NoisePredictor,
    x_t: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor> {
    s.check_t(t)?;
    let n = x_t.dim(0)?;
    let eps = model.predict(x_t, &vec![t; n])?;
    let mean = posterior_mean(x_t, &eps, s.beta[t], s.alpha_bar[t])?;
    let out = if t > 0 {
        let z = normal_tensor(seed, "p-sample", t as u64, x_t.dims(), x_t.dtype(), x_t.device())?;
        (mean + (z * s.beta[t].sqrt())?)?
    } else {
        mean
    };
    if !nn::all_finite(&out)? {
        return Err(Error::numeric(
            format!("sampling step t={t}"),
            "non-finite intermediate image",
        ));
    }
    Ok(out)
}

/// Runs the full reverse chain from seeded standard normal noise and clamps
/// to [−1, 1]. Returns `count × channels × size × size`.
pub fn sample(
    model: &impl NoisePredictor,
    s: &DiffusionSchedule,
    count: usize,
    channels: usize,
    size: usize,
    seed: u64,
    device: &Device,
) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut x = normal_tensor(seed, "sample-init", 0, &[count, channels, size, size], DType::F32, device)?;
    for t in (0..s.steps()).rev() {
        // detached so the chain does not keep every step's graph alive
        x = p_sample_step(model, &x, t, s, rng::derive_seed(seed, "sample-step", t as u64))
            .map_err(|e| match e {
                Error::Numeric { stage, detail } => Error::numeric(format!("{stage} of {}", s.steps()), detail),
                other => other,
            })?
            .detach();
    }
    Ok(x.clamp(-1f32, 1f32)?)
}
