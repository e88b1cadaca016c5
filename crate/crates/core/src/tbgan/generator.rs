use candle_core::{DType, Device, Tensor, D};

use super::attention::{double_window_attention, AttentionWeights};
use super::TbGanConfig;
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamBuilder, ParamStore};
use crate::rng;

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_keepdim(D::Minus1)?)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

/// Fixed 2-D sinusoidal encoding, (1, size, size, dim); the first half of
/// the channels encodes rows and the second half columns.
fn positional_encoding(size: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut v = vec![0f32; size * size * dim];
    for y in 0..size {
        for x in 0..size {
            let base = (y * size + x) * dim;
            for k in 0..quarter {
                let freq = (-(10000f64.ln()) * k as f64 / quarter as f64).exp();
                let (ay, ax) = (y as f64 * freq, x as f64 * freq);
                v[base + k] = ay.sin() as f32;
                v[base + quarter + k] = ay.cos() as f32;
                v[base + 2 * quarter + k] = ax.sin() as f32;
                v[base + 3 * quarter + k] = ax.cos() as f32;
            }
        }
    }
    Ok(Tensor::from_vec(v, (1, size, size, dim), device)?.to_dtype(dtype)?)
}

/// Style-conditioned layer norm: `norm(x) · (1 + γ(w)) + β(w)`.
struct AdaNorm {
    affine: Linear,
}

impl AdaNorm {
    fn new(b: &mut ParamBuilder, name: &str, style: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            affine: Linear::with_init(b, name, style, 2 * dim, Init::FanIn { fan_in: style, gain: 0.25 }, true)?,
        })
    }

    fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (n, _, _, c) = x.dims4()?;
        let s = self.affine.forward(w)?;
        let gamma = (s.narrow(1, 0, c)? + 1.0)?.reshape((n, 1, 1, c))?;
        let beta = s.narrow(1, c, c)?.reshape((n, 1, 1, c))?;
        Ok(layer_norm(x)?.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

struct Block {
    norm1: AdaNorm,
    attn: AttentionWeights,
    norm2: AdaNorm,
    fc1: Linear,
    fc2: Linear,
    noise_strength: Option<Tensor>,
}

impl Block {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &TbGanConfig, dim: usize) -> Result<Self> {
        let hidden = dim * cfg.mlp_ratio;
        b.scope(name, |b| {
            Ok(Self {
                norm1: AdaNorm::new(b, "norm1", cfg.latent_dim, dim)?,
                attn: AttentionWeights::new(b, "attn", dim, TbGanConfig::heads(dim))?,
                norm2: AdaNorm::new(b, "norm2", cfg.latent_dim, dim)?,
                fc1: Linear::new(b, "fc1", dim, hidden)?,
                fc2: Linear::with_init(b, "fc2", hidden, dim, Init::FanIn { fan_in: hidden, gain: 0.5 }, true)?,
                noise_strength: if cfg.noise_injection {
                    Some(b.param("noise_strength", &[dim], Init::Zeros)?)
                } else {
                    None
                },
            })
        })
    }

    fn forward(&self, x: &Tensor, w: &Tensor, window: usize, noise: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x.clone();
        if let (Some(s), Some(z)) = (&self.noise_strength, noise) {
            x = x.broadcast_add(&z.broadcast_mul(s)?)?;
        }
        let h = double_window_attention(&self.norm1.forward(&x, w)?, window, &self.attn)?;
        let x = (x + h)?;
        let h = self.fc2.forward(&nn::gelu(&self.fc1.forward(&self.norm2.forward(&x, w)?)?)?)?;
        Ok((x + h)?)
    }
}

struct Stage {
    size: usize,
    upsample: Option<Linear>,
    blocks: Vec<Block>,
    to_image: Linear,
}

/// Mapping network, learned 4×4 input, and one attention stage per
/// resolution from 4 to the output size. Each stage adds its image
/// projection to the upsampled running image.
pub struct StyleGenerator {
    cfg: TbGanConfig,
    params: ParamStore,
    mapping: Vec<Linear>,
    constant: Tensor,
    stages: Vec<Stage>,
}

impl StyleGenerator {
    pub fn new(cfg: TbGanConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(device.clone(), seed, "tbgan-generator");
        let z = cfg.latent_dim;
        let mapping = (0..cfg.mapping_layers)
            .map(|i| Linear::with_init(&mut b, &format!("mapping.{i}"), z, z, Init::FanIn { fan_in: z, gain: 2f32.sqrt() }, true))
            .collect::<Result<Vec<_>>>()?;
        let sizes = cfg.stage_sizes();
        let c0 = cfg.channels(4);
        let constant = b.param("constant", &[1, 4, 4, c0], Init::Normal(1.0))?;
        let mut stages = Vec::with_capacity(sizes.len());
        let mut prev = c0;
        for (si, &size) in sizes.iter().enumerate() {
            let dim = cfg.channels(size);
            let stage = b.scope(&format!("stage{si}"), |b| {
                let upsample = if si > 0 { Some(Linear::new(b, "upsample", prev, dim)?) } else { None };
                let blocks = (0..cfg.blocks_per_stage)
                    .map(|k| Block::new(b, &format!("block{k}"), &cfg, dim))
                    .collect::<Result<Vec<_>>>()?;
                let to_image = Linear::with_init(b, "to_image", dim, cfg.image_channels, Init::FanIn { fan_in: dim, gain: 0.5 }, true)?;
                Ok(Stage { size, upsample, blocks, to_image })
            })?;
            stages.push(stage);
            prev = dim;
        }
        Ok(Self {
            cfg,
            params: b.finish(),
            mapping,
            constant,
            stages,
        })
    }

    pub fn config(&self) -> &TbGanConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Style vectors from latents (N, latent_dim).
    pub fn map(&self, z: &Tensor) -> Result<Tensor> {
        let norm = (z.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
        let mut w = z.broadcast_div(&norm)?;
        for l in &self.mapping {
            w = nn::leaky_relu(&l.forward(&w)?, 0.2)?;
        }
        Ok(w)
    }

    /// Images (N, C, R, R) in [-1, 1]. Per-block noise maps are drawn from
    /// `noise_seed`.
    pub fn forward(&self, z: &Tensor, noise_seed: u64) -> Result<Tensor> {
        let (n, zd) = z.dims2()?;
        if zd != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latent width {zd}, generator expects {}", self.cfg.latent_dim)));
        }
        let w = self.map(z)?;
        let device = z.device();
        let c0 = self.constant.dim(3)?;
        let mut x = self.constant.broadcast_as((n, 4, 4, c0))?.contiguous()?;
        let mut image: Option<Tensor> = None;
        let mut block_index = 0u64;
        for stage in &self.stages {
            if let Some(up) = &stage.upsample {
                let nchw = nn::upsample_nearest2(&x.permute((0, 3, 1, 2))?.contiguous()?)?;
                x = up.forward(&nchw.permute((0, 2, 3, 1))?.contiguous()?)?;
            }
            let dim = x.dim(3)?;
            x = x.broadcast_add(&positional_encoding(stage.size, dim, x.dtype(), device)?)?;
            for block in &stage.blocks {
                let noise = if self.cfg.noise_injection {
                    let mut r = rng::stream(noise_seed, "tbgan-noise", block_index);
                    let v = rng::normal_vec(&mut r, n * stage.size * stage.size);
                    Some(Tensor::from_vec(v, (n, stage.size, stage.size, 1), device)?.to_dtype(x.dtype())?)
                } else {
                    None
                };
                x = block.forward(&x, &w, self.cfg.window, noise.as_ref())?;
                block_index += 1;
            }
            let rgb = stage.to_image.forward(&x)?.permute((0, 3, 1, 2))?.contiguous()?;
            image = Some(match image {
                None => rgb,
                Some(prev) => (nn::upsample_nearest2(&prev)? + rgb)?,
            });
        }
        let image = image.ok_or_else(|| Error::Config("generator has no stages".into()))?;
        Ok(image.tanh()?)
    }
}

/// Standard-normal latents (N, latent_dim) from a seeded stream.
pub fn sample_latents(count: usize, latent_dim: usize, seed: u64, device: &Device) -> Result<Tensor> {
    let mut r = rng::stream(seed, "tbgan-latent", 0);
    Ok(Tensor::from_vec(rng::normal_vec(&mut r, count * latent_dim), (count, latent_dim), device)?)
}

/// Generates one image per latent row.
pub fn generate(g: &StyleGenerator, latent: &Tensor, seed: u64) -> Result<ImageBatch> {
    let y = g.forward(latent, seed)?;
    if !nn::all_finite(&y)? {
        return Err(Error::numeric("generation", "non-finite pixel values"));
    }
    Ok(ImageBatch::from_tensor(&y)?.clamped())
}
