//! Adaptive pseudo augmentation: with probability `p` a generated image is
//! shown to the discriminator as real. `p` follows an overfitting signal
//! taken from the sign of the discriminator's logits on real inputs.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TARGET: f64 = 0.6;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
/// Images shown for `p` to cross [0, 1] once at full speed.
pub const DEFAULT_TRAVERSE_IMAGES: f64 = 500_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct APAState {
    pub p: f64,
    pub lambda_r: f64,
    pub target: f64,
    pub step_size: f64,
    pub ema_decay: f64,
}

impl APAState {
    /// Starts at `p = 0` with a step size of `batch_size / traverse_images`.
    pub fn new(batch_size: usize, target: f64, traverse_images: f64) -> Result<Self> {
        if !(traverse_images > 0.0) || !(0.0..=1.0).contains(&target) {
            return Err(Error::Config(format!(
                "APA needs traverse_images > 0 and target in [0, 1], got {traverse_images} and {target}"
            )));
        }
        Ok(Self {
            p: 0.0,
            lambda_r: 0.0,
            target,
            step_size: batch_size as f64 / traverse_images,
            ema_decay: DEFAULT_EMA_DECAY,
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One update from a batch of real-side logits. An empty batch leaves the
/// state unchanged.
pub fn apa_update(state: &APAState, real_logits: &[f64]) -> APAState {
    if real_logits.is_empty() {
        return *state;
    }
    let mean_sign = real_logits.iter().map(|&v| sign(v)).sum::<f64>() / real_logits.len() as f64;
    let lambda_r = state.lambda_r + (1.0 - state.ema_decay) * (mean_sign - state.lambda_r);
    let p = (state.p + state.step_size * sign(lambda_r - state.target)).clamp(0.0, 1.0);
    APAState { p, lambda_r, ..*state }
}

/// Which batch positions take the fake image.
pub(crate) fn apa_choices(n: usize, p: f64, seed: u64) -> Vec<bool> {
    let mut r = rng::stream(seed, "apa-mix", 0);
    (0..n).map(|_| r.random::<f64>() < p).collect()
}

/// Replaces each real image by the fake one at the same position with
/// probability `p`.
pub fn apa_mix(real: &ImageBatch, fake: &ImageBatch, p: f64, seed: u64) -> Result<ImageBatch> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("real {:?} and fake {:?} differ", real.shape(), fake.shape())));
    }
    let mut out = real.clone();
    for (i, take) in apa_choices(real.count(), p, seed).into_iter().enumerate() {
        if take {
            out.image_mut(i).copy_from_slice(fake.image(i));
        }
    }
    Ok(out)
}

pub(crate) fn apa_mix_tensor(real: &Tensor, fake: &Tensor, choices: &[bool]) -> Result<Tensor> {
    if !choices.iter().any(|&c| c) {
        return Ok(real.clone());
    }
    if choices.iter().all(|&c| c) {
        return Ok(fake.clone());
    }
    let parts = choices
        .iter()
        .enumerate()
        .map(|(i, &c)| if c { fake.narrow(0, i, 1) } else { real.narrow(0, i, 1) })
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(p: f64, lambda_r: f64) -> APAState {
        APAState { p, lambda_r, target: 0.6, step_size: 0.1, ema_decay: 0.99 }
    }

    #[test]
    fn saturated_signal_walks_p_to_one() {
        let mut s = state(0.0, 1.0);
        let logits = [2.0, 0.5, 1.0];
        for k in 1..=10 {
            s = apa_update(&s, &logits);
            assert!((s.p - 0.1 * k as f64).abs() < 1e-12);
        }
        for _ in 0..5 {
            s = apa_update(&s, &logits);
            assert_eq!(s.p, 1.0);
        }
    }

    #[test]
    fn fixed_point_and_lower_clamp() {
        // four positive and one negative logit give a mean sign of exactly 0.6
        let s = state(0.3, 0.6);
        let next = apa_update(&s, &[1.0, 1.0, 1.0, 1.0, -1.0]);
        assert_eq!(next.lambda_r, 0.6);
        assert_eq!(next.p, 0.3);
        let s = state(0.0, -0.2);
        let next = apa_update(&s, &[-1.0, -3.0]);
        assert!(next.lambda_r < next.target);
        assert_eq!(next.p, 0.0);
        assert_eq!(apa_update(&s, &[]), s);
    }

    #[test]
    fn mixing_limits_and_rate() {
        let real = ImageBatch::filled([1000, 1, 2, 2], -1.0);
        let fake = ImageBatch::filled([1000, 1, 2, 2], 1.0);
        assert_eq!(apa_mix(&real, &fake, 0.0, 1).unwrap(), real);
        assert_eq!(apa_mix(&real, &fake, 1.0, 1).unwrap(), fake);
        let m = apa_mix(&real, &fake, 0.5, 1).unwrap();
        let frac = (0..1000).filter(|&i| m.image(i)[0] == 1.0).count() as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "fake fraction {frac}");
        assert_eq!(m, apa_mix(&real, &fake, 0.5, 1).unwrap());
        assert!(apa_mix(&real, &ImageBatch::filled([999, 1, 2, 2], 0.0), 0.5, 1).is_err());
    }
}
