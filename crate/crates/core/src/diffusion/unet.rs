use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, GroupNorm, Init, Linear, ParamBuilder, ParamStore};

/// Width and depth of the denoising U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    /// Spatial sizes at which self-attention is applied.
    pub attention_resolutions: Vec<usize>,
    pub groups: usize,
}

impl UNetConfig {
    pub fn standard(size: usize, image_channels: usize) -> Self {
        Self {
            image_channels,
            size,
            base_channels: 64,
            channel_mults: vec![1, 1, 2, 2, 4],
            num_res_blocks: 2,
            attention_resolutions: vec![16],
            groups: 32,
        }
    }

    pub fn tiny(size: usize, image_channels: usize) -> Self {
        Self {
            image_channels,
            size,
            base_channels: 8,
            channel_mults: vec![1, 2, 4],
            num_res_blocks: 1,
            attention_resolutions: Vec::new(),
            groups: 4,
        }
    }

    pub fn preset(name: &str, size: usize, image_channels: usize) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard(size, image_channels)),
            "tiny" => Ok(Self::tiny(size, image_channels)),
            other => Err(Error::Config(format!("unknown U-Net preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.base_channels == 0 || self.groups == 0 {
            return Err(Error::Config("U-Net needs at least one level and nonzero widths".into()));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::Config(format!("image_channels must be 1 or 3, got {}", self.image_channels)));
        }
        let down = 1usize << (self.channel_mults.len() - 1);
        if self.size == 0 || self.size % down != 0 {
            return Err(Error::Config(format!(
                "size {} is not divisible by the {down}× total downsampling",
                self.size
            )));
        }
        for m in &self.channel_mults {
            if m * self.base_channels % self.groups != 0 {
                return Err(Error::Config(format!(
                    "width {} not divisible into {} groups",
                    m * self.base_channels,
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps, shape (N, dim).
pub fn timestep_embedding(t: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for k in 0..dim {
            let i = k % half.max(1);
            let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let a = ti as f64 * freq;
            v.push(if k < half { a.sin() } else if k < 2 * half { a.cos() } else { 0.0 } as f32);
        }
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), device)?)
}

fn embedding_dim(base: usize) -> usize {
    base.max(32)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                norm1: GroupNorm::new(b, "norm1", groups, cin)?,
                conv1: Conv2d::new(b, "conv1", cin, cout, 3, 1)?,
                temb: Linear::new(b, "temb", tdim, cout)?,
                norm2: GroupNorm::new(b, "norm2", groups, cout)?,
                conv2: Conv2d::with_init(b, "conv2", cout, cout, 3, 1, Init::FanIn { fan_in: cout * 9, gain: 0.1 })?,
                skip: if cin != cout {
                    Some(Conv2d::with_init(b, "skip", cin, cout, 1, 1, Init::FanIn { fan_in: cin, gain: 1.0 })?)
                } else {
                    None
                },
            })
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.temb.forward(temb)?;
        let (n, c) = e.dims2()?;
        let h = h.broadcast_add(&e.reshape((n, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct AttnBlock {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new(b: &mut ParamBuilder, name: &str, c: usize, groups: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                norm: GroupNorm::new(b, "norm", groups, c)?,
                qkv: Conv2d::with_init(b, "qkv", c, 3 * c, 1, 1, Init::FanIn { fan_in: c, gain: 1.0 })?,
                proj: Conv2d::with_init(b, "proj", c, c, 1, 1, Init::FanIn { fan_in: c, gain: 0.1 })?,
            })
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((n, 3, c, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        let scores = (q.matmul(&k)? * (1.0 / (c as f64).sqrt()))?;
        let attn = nn::softmax_last(&scores)?;
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((n, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

enum Layer {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv2d),
    Up(Conv2d),
}

/// Residual U-Net noise predictor with sinusoidal timestep embedding,
/// group normalisation and self-attention at configured resolutions.
pub struct UNet {
    cfg: UNetConfig,
    params: ParamStore,
    temb1: Linear,
    temb2: Linear,
    input: Conv2d,
    down: Vec<(Layer, bool)>,
    mid: Vec<Layer>,
    up: Vec<(Layer, bool)>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl UNet {
    pub fn new(cfg: UNetConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(device.clone(), seed, "unet-init");
        let base = cfg.base_channels;
        let tdim = 4 * base;
        let g = cfg.groups;
        let temb1 = Linear::new(&mut b, "temb1", embedding_dim(base), tdim)?;
        let temb2 = Linear::new(&mut b, "temb2", tdim, tdim)?;
        let input = Conv2d::with_init(&mut b, "input", cfg.image_channels, base, 3, 1, Init::FanIn { fan_in: cfg.image_channels * 9, gain: 1.0 })?;

        // (layer, pushes a skip connection)
        let mut down = Vec::new();
        let mut skips = vec![base];
        let mut ch = base;
        let mut res = cfg.size;
        let levels = cfg.channel_mults.len();
        for (lvl, &m) in cfg.channel_mults.iter().enumerate() {
            let cout = base * m;
            for r in 0..cfg.num_res_blocks {
                down.push((Layer::Res(ResBlock::new(&mut b, &format!("down{lvl}.res{r}"), ch, cout, tdim, g)?), false));
                ch = cout;
                if cfg.attention_resolutions.contains(&res) {
                    down.push((Layer::Attn(AttnBlock::new(&mut b, &format!("down{lvl}.attn{r}"), ch, g)?), false));
                }
                down.last_mut().expect("just pushed").1 = true;
                skips.push(ch);
            }
            if lvl + 1 < levels {
                down.push((Layer::Down(Conv2d::new(&mut b, &format!("down{lvl}.downsample"), ch, ch, 3, 2)?), true));
                skips.push(ch);
                res /= 2;
            }
        }
        let mid = vec![
            Layer::Res(ResBlock::new(&mut b, "mid.res0", ch, ch, tdim, g)?),
            Layer::Attn(AttnBlock::new(&mut b, "mid.attn", ch, g)?),
            Layer::Res(ResBlock::new(&mut b, "mid.res1", ch, ch, tdim, g)?),
        ];
        // (layer, pops a skip connection)
        let mut up = Vec::new();
        for (lvl, &m) in cfg.channel_mults.iter().enumerate().rev() {
            let cout = base * m;
            for r in 0..=cfg.num_res_blocks {
                let skip = skips.pop().expect("skip count matches");
                up.push((Layer::Res(ResBlock::new(&mut b, &format!("up{lvl}.res{r}"), ch + skip, cout, tdim, g)?), true));
                ch = cout;
                if cfg.attention_resolutions.contains(&res) {
                    up.push((Layer::Attn(AttnBlock::new(&mut b, &format!("up{lvl}.attn{r}"), ch, g)?), false));
                }
            }
            if lvl > 0 {
                up.push((Layer::Up(Conv2d::new(&mut b, &format!("up{lvl}.upsample"), ch, ch, 3, 1)?), false));
                res *= 2;
            }
        }
        let out_norm = GroupNorm::new(&mut b, "out_norm", g, ch)?;
        let out = Conv2d::with_init(&mut b, "out", ch, cfg.image_channels, 3, 1, Init::Zeros)?;
        Ok(Self {
            cfg,
            params: b.finish(),
            temb1,
            temb2,
            input,
            down,
            mid,
            up,
            out_norm,
            out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn apply(layer: &Layer, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        match layer {
            Layer::Res(r) => r.forward(x, temb),
            Layer::Attn(a) => a.forward(x),
            Layer::Down(c) => c.forward(x),
            Layer::Up(c) => c.forward(&nn::upsample_nearest2(x)?),
        }
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if t.len() != n {
            return Err(Error::Shape(format!("{} timesteps for {n} images", t.len())));
        }
        if c != self.cfg.image_channels || h != self.cfg.size || w != self.cfg.size {
            return Err(Error::Shape(format!(
                "U-Net built for {}×{}×{} got {c}×{h}×{w}",
                self.cfg.image_channels, self.cfg.size, self.cfg.size
            )));
        }
        let x = x.to_dtype(DType::F32)?;
        let temb = timestep_embedding(t, embedding_dim(self.cfg.base_channels), x.device())?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;
        let mut h = self.input.forward(&x)?;
        let mut skips = vec![h.clone()];
        for (layer, push) in &self.down {
            h = Self::apply(layer, &h, &temb)?;
            if *push {
                skips.push(h.clone());
            }
        }
        for layer in &self.mid {
            h = Self::apply(layer, &h, &temb)?;
        }
        for (layer, pop) in &self.up {
            if *pop {
                let s = skips.pop().expect("skip count matches");
                h = Tensor::cat(&[&h, &s], 1)?;
            }
            h = Self::apply(layer, &h, &temb)?;
        }
        let out = self.out.forward(&self.out_norm.forward(&h)?.silu()?)?;
        if !nn::all_finite(&out)? {
            return Err(Error::numeric("unet forward", "non-finite prediction"));
        }
        Ok(out)
    }
}
