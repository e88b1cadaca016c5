use candle_core::{Device, Tensor};

use super::TbGanConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Linear, ParamBuilder, ParamStore};

/// Strided convolutional critic down to 4×4, then two dense layers.
///
/// Only convolutions, leaky ReLU and dense layers are used, all of which
/// support the second-order gradients the R1 penalty needs.
pub struct ConvDiscriminator {
    params: ParamStore,
    from_image: Conv2d,
    stages: Vec<(Conv2d, Conv2d)>,
    fc1: Linear,
    fc2: Linear,
    resolution: usize,
}

impl ConvDiscriminator {
    pub fn new(cfg: &TbGanConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.disc_widths;
        let mut b = ParamBuilder::new(device.clone(), seed, "tbgan-discriminator");
        let from_image = Conv2d::new(&mut b, "from_image", cfg.image_channels, w[0], 1, 1)?;
        let stages = (0..w.len())
            .map(|i| {
                let out = *w.get(i + 1).unwrap_or(&w[i]);
                b.scope(&format!("stage{i}"), |b| {
                    Ok((Conv2d::new(b, "conv", w[i], w[i], 3, 1)?, Conv2d::new(b, "down", w[i], out, 3, 2)?))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let last = w[w.len() - 1];
        let fc1 = Linear::new(&mut b, "fc1", last * 16, last)?;
        let fc2 = Linear::new(&mut b, "fc2", last, 1)?;
        Ok(Self {
            params: b.finish(),
            from_image,
            stages,
            fc1,
            fc2,
            resolution: cfg.resolution,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits (N, 1).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!("discriminator expects {0}×{0} inputs, got {h}×{w}", self.resolution)));
        }
        let mut y = nn::leaky_relu(&self.from_image.forward(x)?, 0.2)?;
        for (conv, down) in &self.stages {
            y = nn::leaky_relu(&conv.forward(&y)?, 0.2)?;
            y = nn::leaky_relu(&down.forward(&y)?, 0.2)?;
        }
        let y = nn::leaky_relu(&self.fc1.forward(&y.reshape((n, ()))?)?, 0.2)?;
        self.fc2.forward(&y)
    }
}
