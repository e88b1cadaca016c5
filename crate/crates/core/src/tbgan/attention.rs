//! Multi-head self-attention restricted to non-overlapping square windows,
//! with an optional cyclic shift of the window grid.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Linear, ParamBuilder};

/// Added to scores between tokens that only share a window because of the
/// cyclic wrap-around.
const MASKED: f64 = -1e9;

/// Query/key/value projection, output projection and head count.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{dim} channels cannot be split into {heads} heads")));
        }
        b.scope(name, |b| {
            Ok(Self {
                qkv: Linear::new(b, "qkv", dim, 3 * dim)?,
                proj: Linear::with_init(b, "proj", dim, dim, Init::FanIn { fan_in: dim, gain: 0.5 }, true)?,
                heads,
            })
        })
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.proj.weight().dim(1)?)
    }
}

fn check(x: &Tensor, window: usize, shift: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, h, w, c) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!("{h}×{w} features do not tile into {window}×{window} windows")));
    }
    if shift >= window {
        return Err(Error::Shape(format!("shift {shift} must be below the window size {window}")));
    }
    Ok((b, h, w, c))
}

/// Cyclic shift of (B, H, W, C) by `s` along both spatial axes.
fn roll2(x: &Tensor, s: i32) -> Result<Tensor> {
    Ok(x.roll(s, 1)?.roll(s, 2)?)
}

/// (B, H, W, C) → (B·nW, window², C), windows in row-major order.
fn partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (gh, gw) = (h / window, w / window);
    Ok(x
        .reshape((b, gh, window, gw, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * gh * gw, window * window, c))?)
}

fn merge(x: &Tensor, b: usize, h: usize, w: usize, window: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    let (gh, gw) = (h / window, w / window);
    Ok(x
        .reshape((b, gh, gw, window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h, w, c))?)
}

/// Additive (nW, L, L) mask over the shifted grid: tokens that came from
/// different regions of the unshifted image do not attend to each other.
fn shift_mask(h: usize, w: usize, window: usize, shift: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let region = |v: usize, n: usize| {
        if v < n - window {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (gh, gw) = (h / window, w / window);
    let l = window * window;
    let mut out = Vec::with_capacity(gh * gw * l * l);
    for wy in 0..gh {
        for wx in 0..gw {
            let labels: Vec<usize> = (0..l)
                .map(|i| region(wy * window + i / window, h) * 3 + region(wx * window + i % window, w))
                .collect();
            for a in &labels {
                for b in &labels {
                    out.push(if a == b { 0.0 } else { MASKED });
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (gh * gw, l, l), device)?.to_dtype(dtype)?)
}

/// Attention over already projected (B, H, W, 3·C) queries, keys and
/// values. Returns the (B·nW, heads, L, L) probabilities and the
/// (B, H, W, C) head outputs before the output projection.
fn attend(qkv: &Tensor, heads: usize, window: usize, shift: usize) -> Result<(Tensor, Tensor)> {
    let (b, h, w, c3) = check(qkv, window, shift)?;
    let c = c3 / 3;
    let hd = c / heads;
    let qkv = if shift > 0 { roll2(qkv, -(shift as i32))? } else { qkv.clone() };
    let t = partition(&qkv, window)?;
    let (bn, l, _) = t.dims3()?;
    let t = t.reshape((bn, l, 3, heads, hd))?.permute((2, 0, 3, 1, 4))?;
    let q = t.get(0)?.contiguous()?;
    let k = t.get(1)?.contiguous()?;
    let v = t.get(2)?.contiguous()?;
    let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (hd as f64).powf(-0.5))?;
    if shift > 0 {
        let nw = bn / b;
        let mask = shift_mask(h, w, window, shift, scores.dtype(), scores.device())?;
        scores = scores
            .reshape((b, nw, heads, l, l))?
            .broadcast_add(&mask.reshape((1, nw, 1, l, l))?)?
            .reshape((bn, heads, l, l))?;
    }
    let probs = nn::softmax_last(&scores)?;
    let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((bn, l, c))?;
    let out = merge(&out, b, h, w, window)?;
    let out = if shift > 0 { roll2(&out, shift as i32)? } else { out };
    Ok((probs, out))
}

/// Window self-attention of (B, H, W, C) features; output has the input
/// shape.
pub fn window_attention(x: &Tensor, window: usize, shift: usize, weights: &AttentionWeights) -> Result<Tensor> {
    check(x, window, shift)?;
    let (_, out) = attend(&weights.qkv.forward(x)?, weights.heads, window, shift)?;
    weights.proj.forward(&out)
}

/// The (B·nW, heads, L, L) attention probabilities used by
/// [`window_attention`].
pub fn window_attention_probs(x: &Tensor, window: usize, shift: usize, weights: &AttentionWeights) -> Result<Tensor> {
    check(x, window, shift)?;
    Ok(attend(&weights.qkv.forward(x)?, weights.heads, window, shift)?.0)
}

/// Half the heads attend within regular windows and half within windows
/// shifted by `window / 2`; the two halves are concatenated before the
/// output projection. Features no larger than one window use a single
/// unshifted window for both halves.
pub fn double_window_attention(x: &Tensor, window: usize, weights: &AttentionWeights) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let heads = weights.heads;
    if heads < 2 || heads % 2 != 0 {
        return Err(Error::Config(format!("double attention needs an even head count, got {heads}")));
    }
    let window = window.min(h).min(w);
    let shift = if h > window || w > window { window / 2 } else { 0 };
    check(x, window, shift)?;
    let hd = c / heads;
    let qkv = weights.qkv.forward(x)?.reshape((b, h, w, 3, heads, hd))?;
    let half = |start: usize| -> Result<Tensor> {
        Ok(qkv.narrow(4, start, heads / 2)?.reshape((b, h, w, 3 * c / 2))?)
    };
    let (_, regular) = attend(&half(0)?, heads / 2, window, 0)?;
    let (_, shifted) = attend(&half(heads / 2)?, heads / 2, window, shift)?;
    weights.proj.forward(&Tensor::cat(&[&regular, &shifted], 3)?)
}
