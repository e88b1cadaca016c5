//! ×2 super-resolution GAN: residual generator with one sub-pixel stage and
//! a strided convolutional discriminator.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::dataset::{self, augment, unit_batches, AugmentConfig, DatasetManifest, Unit};
use crate::error::{Error, Result};
use crate::imageops::downsample2_bicubic;
use crate::metrics::FeatureExtractor;
use crate::nn::{self, Adam, AdamConfig, Conv2d, Init, Linear, NamedArray, PRelu, ParamBuilder, ParamStore};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrConfig {
    pub image_channels: usize,
    pub width: usize,
    pub res_blocks: usize,
    pub disc_width: usize,
    /// Number of stride-2 stages in the discriminator.
    pub disc_stages: usize,
    /// Kernel size of the generator's first and last convolutions.
    pub edge_kernel: usize,
}

impl SrConfig {
    pub fn standard(image_channels: usize) -> Self {
        Self {
            image_channels,
            width: 64,
            res_blocks: 8,
            disc_width: 32,
            disc_stages: 4,
            edge_kernel: 9,
        }
    }

    pub fn tiny(image_channels: usize) -> Self {
        Self {
            image_channels,
            width: 16,
            res_blocks: 2,
            disc_width: 16,
            disc_stages: 3,
            edge_kernel: 3,
        }
    }

    pub fn preset(name: &str, image_channels: usize) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard(image_channels)),
            "tiny" => Ok(Self::tiny(image_channels)),
            other => Err(Error::Config(format!("unknown SR preset {other:?}"))),
        }
    }
}

struct ResBlock {
    conv1: Conv2d,
    act: PRelu,
    conv2: Conv2d,
}

pub struct SrGenerator {
    cfg: SrConfig,
    params: ParamStore,
    head: Conv2d,
    head_act: PRelu,
    blocks: Vec<ResBlock>,
    mid: Conv2d,
    up: Conv2d,
    up_act: PRelu,
    tail: Conv2d,
}

impl SrGenerator {
    pub fn new(cfg: SrConfig, seed: u64, device: &Device) -> Result<Self> {
        let mut b = ParamBuilder::new(device.clone(), seed, "sr-generator");
        let (c, w) = (cfg.image_channels, cfg.width);
        let k = cfg.edge_kernel;
        if k % 2 == 0 {
            return Err(Error::Config(format!("edge_kernel must be odd, got {k}")));
        }
        let head = Conv2d::with_init(&mut b, "head", c, w, k, 1, Init::FanIn { fan_in: c * k * k, gain: 1.0 })?;
        let head_act = PRelu::new(&mut b, "head_act", w)?;
        let mut blocks = Vec::new();
        for i in 0..cfg.res_blocks {
            blocks.push(b.scope(&format!("res{i}"), |b| {
                Ok(ResBlock {
                    conv1: Conv2d::new(b, "conv1", w, w, 3, 1)?,
                    act: PRelu::new(b, "act", w)?,
                    conv2: Conv2d::with_init(b, "conv2", w, w, 3, 1, Init::FanIn { fan_in: w * 9, gain: 0.1 })?,
                })
            })?);
        }
        let mid = Conv2d::with_init(&mut b, "mid", w, w, 3, 1, Init::FanIn { fan_in: w * 9, gain: 0.1 })?;
        let up = Conv2d::new(&mut b, "up", w, 4 * w, 3, 1)?;
        let up_act = PRelu::new(&mut b, "up_act", w)?;
        let tail = Conv2d::with_init(&mut b, "tail", w, c, k, 1, Init::FanIn { fan_in: w * k * k, gain: 0.5 })?;
        Ok(Self {
            cfg,
            params: b.finish(),
            head,
            head_act,
            blocks,
            mid,
            up,
            up_act,
            tail,
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// (N, C, s, s) → (N, C, 2s, 2s), values in (−1, 1).
    pub fn forward(&self, low: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = low.dims4()?;
        if h != w {
            return Err(Error::Shape(format!("super-resolution needs square input, got {h}×{w}")));
        }
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.cfg.image_channels)));
        }
        let x0 = self.head_act.forward(&self.head.forward(low)?)?;
        let mut x = x0.clone();
        for blk in &self.blocks {
            let r = blk.conv2.forward(&blk.act.forward(&blk.conv1.forward(&x)?)?)?;
            x = (x + r)?;
        }
        let x = (self.mid.forward(&x)? + x0)?;
        let x = self.up_act.forward(&nn::pixel_shuffle(&self.up.forward(&x)?, 2)?)?;
        Ok(self.tail.forward(&x)?.tanh()?)
    }
}

/// Host-side wrapper of [`SrGenerator::forward`].
pub fn sr_generate(g: &SrGenerator, low: &ImageBatch) -> Result<ImageBatch> {
    let t = low.to_tensor(g.params().device())?;
    ImageBatch::from_tensor(&g.forward(&t)?)
}

/// Strided convolutional classifier with one logit per image.
pub struct SrDiscriminator {
    params: ParamStore,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl SrDiscriminator {
    pub fn new(cfg: &SrConfig, seed: u64, device: &Device) -> Result<Self> {
        let mut b = ParamBuilder::new(device.clone(), seed, "sr-discriminator");
        let mut convs = vec![Conv2d::new(&mut b, "conv0", cfg.image_channels, cfg.disc_width, 3, 1)?];
        let mut ch = cfg.disc_width;
        for i in 0..cfg.disc_stages {
            let out = (ch * 2).min(8 * cfg.disc_width);
            convs.push(Conv2d::new(&mut b, &format!("down{i}"), ch, out, 3, 2)?);
            ch = out;
        }
        let fc1 = Linear::new(&mut b, "fc1", ch, 2 * ch)?;
        let fc2 = Linear::new(&mut b, "fc2", 2 * ch, 1)?;
        Ok(Self {
            params: b.finish(),
            convs,
            fc1,
            fc2,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits of shape (N, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = nn::leaky_relu(&c.forward(&h)?, 0.2)?;
        }
        let h = h.mean((2, 3))?;
        self.fc2.forward(&nn::leaky_relu(&self.fc1.forward(&h)?, 0.2)?)
    }
}

/// Scalar loss tensors of one SR training step.
pub struct SrLosses {
    pub g_loss: Tensor,
    pub d_loss: Tensor,
    pub content: Tensor,
}

/// Discriminator cross-entropy averaged over all 2N real/fake decisions.
pub fn discriminator_bce(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let r = nn::softplus(&real_logits.neg()?)?.mean_all()?;
    let f = nn::softplus(fake_logits)?.mean_all()?;
    Ok(((r + f)? * 0.5)?)
}

/// Content loss in pixel space, or in the extractor's feature space when
/// one is supplied.
pub fn content_loss(sr: &Tensor, high: &Tensor, features: Option<&FeatureExtractor>) -> Result<Tensor> {
    match features {
        None => nn::mse(sr, high),
        Some(e) => nn::mse(&e.features_tensor(sr)?, &e.features_tensor(high)?),
    }
}

/// Generator loss `content + λ_adv · softplus(−D(G(low)))` and the
/// discriminator loss on `high` versus `G(low)`.
pub fn sr_losses(
    g: &SrGenerator,
    d: &SrDiscriminator,
    low: &Tensor,
    high: &Tensor,
    lambda_adv: f64,
    features: Option<&FeatureExtractor>,
) -> Result<SrLosses> {
    let (ln, lc, lh, lw) = low.dims4()?;
    if high.dims() != [ln, lc, 2 * lh, 2 * lw] {
        return Err(Error::Shape(format!("high {:?} is not twice low {:?}", high.dims(), low.dims())));
    }
    let sr = g.forward(low)?;
    let content = content_loss(&sr, high, features)?;
    let g_loss = if lambda_adv == 0.0 {
        content.clone()
    } else {
        let adv = nn::softplus(&d.forward(&sr)?.neg()?)?.mean_all()?;
        (&content + (adv * lambda_adv)?)?
    };
    let d_loss = discriminator_bce(&d.forward(high)?, &d.forward(&sr.detach())?)?;
    Ok(SrLosses { g_loss, d_loss, content })
}

/// (low, high) pairs: highs loaded at `high_size`, lows bicubic-downsampled
/// by 2, in seed-determined batch order.
pub fn make_pairs(
    manifest: &DatasetManifest,
    high_size: usize,
    channels: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(ImageBatch, ImageBatch)>> {
    if high_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!("high size {high_size} is odd")));
    }
    dataset::make_batches(manifest, batch_size, high_size, channels, seed)?
        .map(|high| {
            let high = high?;
            Ok((downsample2_bicubic(&high), high))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrTrainConfig {
    pub units: u64,
    pub unit: Unit,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_betas: (f64, f64),
    pub lambda_adv: f64,
    pub feature_content: bool,
    pub seed: u64,
    /// Applied to the high-resolution image before the pair is formed.
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrTraceRow {
    pub epoch: u64,
    pub g_loss: f64,
    pub d_loss: f64,
    pub content_loss: f64,
    pub wall_time_s: f64,
}

impl SrTraceRow {
    pub const HEADER: &'static str = "epoch,g_loss,d_loss,content_loss,wall_time_s";

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{:.3}", self.epoch, self.g_loss, self.d_loss, self.content_loss, self.wall_time_s)
    }
}

/// Alternating discriminator/generator Adam training on real pairs.
pub struct SrTrainer {
    g: SrGenerator,
    d: SrDiscriminator,
    opt_g: Adam,
    opt_d: Adam,
    features: Option<FeatureExtractor>,
    cfg: SrTrainConfig,
    next_unit: u64,
}

impl SrTrainer {
    pub fn new(arch: SrConfig, cfg: SrTrainConfig, device: &Device) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let g = SrGenerator::new(arch.clone(), derive_seed(cfg.seed, "sr-g-weights", 0), device)?;
        let d = SrDiscriminator::new(&arch, derive_seed(cfg.seed, "sr-d-weights", 0), device)?;
        let opt_g = Adam::new(g.params(), AdamConfig::new(cfg.lr_generator, cfg.adam_betas))?;
        let opt_d = Adam::new(d.params(), AdamConfig::new(cfg.lr_discriminator, cfg.adam_betas))?;
        let features = if cfg.feature_content { Some(FeatureExtractor::tiny()?) } else { None };
        Ok(Self {
            g,
            d,
            opt_g,
            opt_d,
            features,
            cfg,
            next_unit: 0,
        })
    }

    pub fn generator(&self) -> &SrGenerator {
        &self.g
    }

    pub fn discriminator(&self) -> &SrDiscriminator {
        &self.d
    }

    pub fn next_unit(&self) -> u64 {
        self.next_unit
    }

    pub fn is_done(&self) -> bool {
        self.next_unit >= self.cfg.units
    }

    /// Mean (g_loss, d_loss, content) over the unit's batches.
    pub fn train_unit(&mut self, highs: &ImageBatch) -> Result<(f64, f64, f64)> {
        if highs.count() == 0 {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        let device = self.g.params().device().clone();
        let shuffle = derive_seed(self.cfg.seed, "sr-shuffle", 0);
        let mut sums = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        for (key, idx) in unit_batches(highs.count(), self.cfg.batch_size, shuffle, self.next_unit, self.cfg.unit) {
            let mut high_b = highs.select(&idx);
            if let Some(a) = &self.cfg.augment {
                high_b = augment(&high_b, a, derive_seed(self.cfg.seed, "sr-augment", key));
            }
            let low = downsample2_bicubic(&high_b).to_tensor(&device)?;
            let high = high_b.to_tensor(&device)?;
            let stage = format!("super-resolution step {key}");

            // one generator pass serves both updates
            let sr = self.g.forward(&low)?;
            let d_loss = discriminator_bce(&self.d.forward(&high)?, &self.d.forward(&sr.detach())?)?;
            let dv = nn::finite_scalar(&d_loss, &stage)?;
            self.opt_d.step(&d_loss.backward()?)?;

            let content = content_loss(&sr, &high, self.features.as_ref())?;
            let g_loss = if self.cfg.lambda_adv == 0.0 {
                content.clone()
            } else {
                let adv = nn::softplus(&self.d.forward(&sr)?.neg()?)?.mean_all()?;
                (&content + (adv * self.cfg.lambda_adv)?)?
            };
            let gv = nn::finite_scalar(&g_loss, &stage)?;
            let cv = nn::finite_scalar(&content, &stage)?;
            self.opt_g.step(&g_loss.backward()?)?;

            sums = (sums.0 + gv, sums.1 + dv, sums.2 + cv);
            n += 1;
        }
        self.next_unit += 1;
        let n = n.max(1) as f64;
        Ok((sums.0 / n, sums.1 / n, sums.2 / n))
    }

    pub fn train(
        &mut self,
        highs: &ImageBatch,
        mut on_unit: impl FnMut(&Self, &SrTraceRow) -> Result<()>,
    ) -> Result<Vec<SrTraceRow>> {
        let start = Instant::now();
        let mut rows = Vec::new();
        while !self.is_done() {
            let (g_loss, d_loss, content_loss) = self.train_unit(highs)?;
            let row = SrTraceRow {
                epoch: self.next_unit,
                g_loss,
                d_loss,
                content_loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_unit(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Content loss of the current generator on `highs` (no update).
    pub fn evaluate_content(&self, highs: &ImageBatch) -> Result<f64> {
        let device = self.g.params().device();
        let low = downsample2_bicubic(highs).to_tensor(device)?;
        let sr = self.g.forward(&low)?;
        nn::finite_scalar(&content_loss(&sr, &highs.to_tensor(device)?, self.features.as_ref())?, "content evaluation")
    }

    pub fn export_state(&self) -> Result<BTreeMap<String, NamedArray>> {
        let mut out = self.g.params().export("g.")?;
        out.extend(self.d.params().export("d.")?);
        out.extend(self.opt_g.export("opt_g.")?);
        out.extend(self.opt_d.export("opt_d.")?);
        Ok(out)
    }

    pub fn import_state(&mut self, arrays: &BTreeMap<String, NamedArray>, next_unit: u64) -> Result<()> {
        self.g.params().import(arrays, "g.")?;
        self.d.params().import(arrays, "d.")?;
        self.opt_g.import(arrays, "opt_g.")?;
        self.opt_d.import(arrays, "opt_d.")?;
        self.next_unit = next_unit;
        Ok(())
    }
}
