//! Transformer-based GAN: a style-modulated generator of window-attention
//! blocks against a convolutional discriminator, trained with
//! differentiable augmentation (DiffAug) and adaptive pseudo augmentation
//! (APA), with weight transfer between planes.

mod apa;
mod attention;
mod diffaug;
mod discriminator;
mod generator;
mod train;

pub use apa::{apa_mix, apa_update, APAState, DEFAULT_EMA_DECAY, DEFAULT_TARGET, DEFAULT_TRAVERSE_IMAGES};
pub use attention::{double_window_attention, window_attention, window_attention_probs, AttentionWeights};
pub use diffaug::{diffaug, diffaug_tensor, DiffAugParams, DiffAugPolicy};
pub use discriminator::ConvDiscriminator;
pub use generator::{generate, sample_latents, StyleGenerator};
pub use train::{TbGanTraceRow, TbGanTrainConfig, TbGanTrainer};

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::derive_seed;

/// R1 strength.
pub const R1_GAMMA: f64 = 10.0;
/// The R1 term is added on steps whose index is a multiple of this.
pub const R1_INTERVAL: u64 = 16;

/// Generator and discriminator shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TbGanConfig {
    pub image_channels: usize,
    pub resolution: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    /// Token width of the low-resolution stages.
    pub max_channels: usize,
    /// Stages above this size halve the width per doubling.
    pub full_width_until: usize,
    pub blocks_per_stage: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub noise_injection: bool,
    /// Discriminator widths, one per halving from `resolution` to 4.
    pub disc_widths: Vec<usize>,
}

impl TbGanConfig {
    pub fn standard(image_channels: usize) -> Self {
        Self {
            image_channels,
            resolution: 256,
            latent_dim: 256,
            mapping_layers: 8,
            max_channels: 256,
            full_width_until: 32,
            blocks_per_stage: 2,
            window: 8,
            mlp_ratio: 4,
            noise_injection: true,
            disc_widths: vec![32, 64, 128, 256, 256, 256],
        }
    }

    pub fn tiny(image_channels: usize) -> Self {
        Self {
            image_channels,
            resolution: 32,
            latent_dim: 64,
            mapping_layers: 2,
            max_channels: 64,
            full_width_until: 8,
            blocks_per_stage: 1,
            window: 8,
            mlp_ratio: 2,
            noise_injection: true,
            disc_widths: vec![16, 32, 64],
        }
    }

    pub fn preset(name: &str, image_channels: usize) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard(image_channels)),
            "tiny" => Ok(Self::tiny(image_channels)),
            other => Err(Error::Config(format!("unknown TB-GAN preset {other:?}"))),
        }
    }

    /// 4, 8, …, resolution.
    pub fn stage_sizes(&self) -> Vec<usize> {
        std::iter::successors(Some(4usize), |s| Some(s * 2)).take_while(|&s| s <= self.resolution).collect()
    }

    /// Token width at a stage size.
    pub fn channels(&self, size: usize) -> usize {
        if size <= self.full_width_until {
            self.max_channels
        } else {
            (self.max_channels / (size / self.full_width_until)).max(16)
        }
    }

    /// Attention heads for a width; always even so the heads split evenly
    /// between regular and shifted windows.
    pub fn heads(dim: usize) -> usize {
        let h = (dim / 32).max(2);
        h + h % 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.image_channels, 1 | 3) {
            return bad(format!("image_channels must be 1 or 3, got {}", self.image_channels));
        }
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return bad(format!("resolution {} must be a power of two of at least 4", self.resolution));
        }
        if self.window < 2 || !self.window.is_power_of_two() {
            return bad(format!("window {} must be a power of two of at least 2", self.window));
        }
        if self.latent_dim == 0 || self.blocks_per_stage == 0 || self.mlp_ratio == 0 || self.max_channels == 0 {
            return bad("latent_dim, blocks_per_stage, mlp_ratio and max_channels must be positive".into());
        }
        if self.full_width_until == 0 || !self.full_width_until.is_power_of_two() {
            return bad(format!("full_width_until {} must be a power of two", self.full_width_until));
        }
        for s in self.stage_sizes() {
            let c = self.channels(s);
            let h = Self::heads(c);
            if c % 4 != 0 || c % h != 0 || (c / h) % 2 != 0 {
                return bad(format!("width {c} at {s}×{s} does not split into {h} heads of even size"));
            }
        }
        let halvings = self.resolution.trailing_zeros() as usize - 2;
        if halvings == 0 {
            return bad("resolution 4 leaves no discriminator stage".into());
        }
        if self.disc_widths.len() != halvings || self.disc_widths.contains(&0) {
            return bad(format!("disc_widths needs {halvings} positive entries for resolution {}", self.resolution));
        }
        Ok(())
    }
}

/// Whether backward passes keep their graph, as second-order terms need.
fn second_order_enabled() -> bool {
    std::env::var("CANDLE_GRAD_DO_NOT_DETACH").is_ok_and(|v| !v.is_empty() && v != "0")
}

/// `(γ/2) · mean_i ‖∇ₓ d(x_i)‖²`, differentiable with respect to the
/// parameters of `d`.
pub fn r1_penalty(d: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, gamma: f64) -> Result<Tensor> {
    if !second_order_enabled() {
        return Err(Error::Config(
            "the R1 penalty needs CANDLE_GRAD_DO_NOT_DETACH=1 set before the first backward pass".into(),
        ));
    }
    let n = x.dim(0)?;
    let xv = Var::from_tensor(&x.detach())?;
    let out = d(xv.as_tensor())?.sum_all()?;
    let grads = out.backward()?;
    let Some(g) = grads.get(xv.as_tensor()) else {
        return Ok(Tensor::zeros((), x.dtype(), x.device())?);
    };
    let sq = g.sqr()?.reshape((n, ()))?.sum(1)?.mean_all()?;
    Ok((sq * (gamma / 2.0))?)
}

/// Losses of one training step.
pub struct GanLosses {
    pub g_loss: Tensor,
    /// Main term plus R1 on lazy steps.
    pub d_loss: Tensor,
    pub r1: Option<Tensor>,
    /// Discriminator logits on the (APA-mixed) real side.
    pub real_logits: Vec<f64>,
}

fn numeric_check(t: &Tensor, step: u64) -> Result<f64> {
    nn::finite_scalar(t, &format!("tb-gan step {step}"))
}

/// Non-saturating logistic losses. The discriminator's real side is the
/// APA mix of `real` and detached fakes; both sides pass through DiffAug.
/// `d_loss` averages over all 2N decisions.
#[allow(clippy::too_many_arguments)]
pub fn gan_losses(
    g: &StyleGenerator,
    d: &ConvDiscriminator,
    real: &Tensor,
    latents: &Tensor,
    policy: &DiffAugPolicy,
    apa: &APAState,
    r1_gamma: f64,
    step_index: u64,
    seed: u64,
) -> Result<GanLosses> {
    let (n, _, h, w) = real.dims4()?;
    if latents.dim(0)? != n {
        return Err(Error::Shape(format!("{} latents for {n} real images", latents.dim(0)?)));
    }
    let fake = g.forward(latents, derive_seed(seed, "tbgan-noise", step_index))?;
    if fake.dims() != real.dims() {
        return Err(Error::Shape(format!("generator output {:?} vs real {:?}", fake.dims(), real.dims())));
    }
    let fake_const = fake.detach();
    let choices = apa::apa_choices(n, apa.p, derive_seed(seed, "tbgan-apa", step_index));
    let real_in = apa::apa_mix_tensor(real, &fake_const, &choices)?;
    let real_aug = DiffAugParams::sample(policy, n, h, w, derive_seed(seed, "tbgan-diffaug-real", step_index))?;
    let fake_aug = DiffAugParams::sample(policy, n, h, w, derive_seed(seed, "tbgan-diffaug-fake", step_index))?;

    let real_logits = d.forward(&real_aug.apply(&real_in)?)?;
    let fake_logits = d.forward(&fake_aug.apply(&fake_const)?)?;
    let d_main = ((nn::softplus(&real_logits.neg()?)?.mean_all()? + nn::softplus(&fake_logits)?.mean_all()?)? * 0.5)?;
    let g_loss = nn::softplus(&d.forward(&fake_aug.apply(&fake)?)?.neg()?)?.mean_all()?;

    let r1 = if r1_gamma > 0.0 && step_index % R1_INTERVAL == 0 {
        Some(r1_penalty(|x| d.forward(&real_aug.apply(x)?), &real_in, r1_gamma)?)
    } else {
        None
    };
    let d_loss = match &r1 {
        Some(r) => (&d_main + r)?,
        None => d_main,
    };
    numeric_check(&g_loss, step_index)?;
    numeric_check(&d_loss, step_index)?;
    let real_logits = real_logits.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(GanLosses {
        g_loss,
        d_loss,
        r1,
        real_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn presets_validate_and_shapes() {
        let t = TbGanConfig::tiny(1);
        t.validate().unwrap();
        assert_eq!(t.stage_sizes(), vec![4, 8, 16, 32]);
        assert_eq!(
            t.stage_sizes().iter().map(|&s| t.channels(s)).collect::<Vec<_>>(),
            vec![64, 64, 32, 16]
        );
        let s = TbGanConfig::standard(1);
        s.validate().unwrap();
        assert_eq!(s.channels(32), 256);
        assert_eq!(s.channels(256), 32);
        assert!(TbGanConfig { resolution: 48, ..t.clone() }.validate().is_err());
        assert!(TbGanConfig { disc_widths: vec![16, 32], ..t.clone() }.validate().is_err());
        assert!(TbGanConfig::preset("huge", 1).is_err());
    }

    #[test]
    fn zero_logits_give_ln2_losses() {
        let cfg = TbGanConfig::tiny(1);
        let g = StyleGenerator::new(cfg.clone(), 1, &Device::Cpu).unwrap();
        let d = ConvDiscriminator::new(&cfg, 2, &Device::Cpu).unwrap();
        for name in ["fc2.weight", "fc2.bias"] {
            let v = d.params().get(name).unwrap();
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let real = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let z = sample_latents(2, cfg.latent_dim, 0, &Device::Cpu).unwrap();
        let apa = APAState::new(2, 0.6, 1000.0).unwrap();
        let l = gan_losses(&g, &d, &real, &z, &DiffAugPolicy::default(), &apa, 0.0, 1, 3).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((l.g_loss.to_scalar::<f32>().unwrap() as f64 - ln2).abs() < 1e-6);
        assert!((l.d_loss.to_scalar::<f32>().unwrap() as f64 - ln2).abs() < 1e-6);
        assert!(l.r1.is_none());
        assert!(l.real_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn r1_of_constant_and_linear_critics() {
        let x = Tensor::from_vec((0..12).map(|i| i as f64 / 6.0).collect::<Vec<_>>(), (2, 1, 2, 3), &Device::Cpu).unwrap();
        let zero = r1_penalty(|x| Ok(Tensor::full(2.0, (x.dim(0)?, 1), x.device())?), &x, 10.0).unwrap();
        assert_eq!(zero.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        // d(x) = w·x: penalty (γ/2)‖w‖², differentiable in w
        let wv: Vec<f64> = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25];
        let w = Var::from_vec(wv.clone(), (1, 1, 2, 3), &Device::Cpu).unwrap();
        let pen = r1_penalty(|x| Ok(x.broadcast_mul(&w)?.reshape((x.dim(0)?, ()))?.sum_keepdim(1)?), &x, 10.0).unwrap();
        let norm2: f64 = wv.iter().map(|v| v * v).sum();
        assert!((pen.to_scalar::<f64>().unwrap() - 5.0 * norm2).abs() < 1e-12);
        let gw = pen.backward().unwrap();
        let gw = gw.get(&w).expect("penalty reaches the probe weights").flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (g, v) in gw.iter().zip(&wv) {
            assert!((g - 10.0 * v).abs() < 1e-12);
        }
    }
}
