use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType, D};

use super::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

/// Dense layer, weight stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(b, name, input, output, Init::FanIn { fan_in: input, gain: 1.0 }, true)
    }

    pub fn with_init(
        b: &mut ParamBuilder,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let weight = b.param("weight", &[input, output], init)?;
            let bias = if bias {
                Some(b.param("bias", &[output], Init::Zeros)?)
            } else {
                None
            };
            Ok(Self { weight, bias })
        })
    }

    /// Wraps existing tensors; `weight` is (in, out).
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Square-kernel 2-D convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// `padding` defaults to `kernel / 2` (same-size output at stride 1).
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        Self::with_init(b, name, input, output, kernel, stride, Init::FanIn { fan_in, gain: 2f32.sqrt() })
    }

    pub fn with_init(
        b: &mut ParamBuilder,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[output, input, kernel, kernel], init)?,
                bias: b.param("bias", &[output], Init::Zeros)?,
                stride,
                padding: kernel / 2,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Normalises groups of channels of an NCHW tensor to zero mean and unit
/// variance (no affine part).
pub fn group_norm_plain(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible into {groups} groups")));
    }
    let g = x.reshape((n, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(2)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(2)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.reshape((n, c, h, w))?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Shape(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        b.scope(name, |b| {
            Ok(Self {
                groups,
                weight: b.param("weight", &[channels], Init::Ones)?,
                bias: b.param("bias", &[channels], Init::Zeros)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::norm::group_norm(x, &self.weight, &self.bias, self.groups, 1e-5)
    }
}

/// Per-channel parametric ReLU on NCHW tensors.
#[derive(Debug, Clone)]
pub struct PRelu {
    alpha: Tensor,
}

impl PRelu {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                alpha: b.param("alpha", &[channels], Init::Const(0.25))?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.alpha.dim(0)?;
        let neg = x.neg()?.relu()?.broadcast_mul(&self.alpha.reshape((1, c, 1, 1))?)?;
        Ok((x.relu()? - neg)?)
    }
}

/// Leaky ReLU built from `relu`, differentiable to second order.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Row-wise softmax with a fused forward pass. The gradient
/// `y ⊙ (g − Σ g ⊙ y)` is built from tensor ops on the output, so it can be
/// differentiated again.
struct SoftmaxLast;

fn softmax_rows<T: WithDType>(v: &[T], row: usize) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    let mut e = vec![0f64; row];
    for (src, dst) in v.chunks(row).zip(out.chunks_mut(row)) {
        let max = src.iter().fold(f64::NEG_INFINITY, |m, a| m.max(a.to_f64()));
        let mut sum = 0.0;
        for (ei, a) in e.iter_mut().zip(src) {
            *ei = (a.to_f64() - max).exp();
            sum += *ei;
        }
        for (d, ei) in dst.iter_mut().zip(&e) {
            *d = T::from_f64(ei / sum);
        }
    }
    out
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, b) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax expects a contiguous input".into()))?;
        let row = layout.dims().last().copied().unwrap_or(1).max(1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[a..b], row)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[a..b], row)),
            _ => return Err(candle_core::Error::Msg("softmax supports f32 and f64 only".into())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((res * grad.broadcast_sub(&dot)?)?))
    }
}

/// Mean squared error over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mse of {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Rearranges (N, C·r², H, W) into (N, C, H·r, W·r).
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by {}", r * r)));
    }
    let oc = c / (r * r);
    Ok(x.reshape((n, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((n, oc, h * r, w * r))?)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("{h}×{w} not divisible by {r}")));
    }
    Ok(x.reshape((n, c, h / r, r, w / r, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((n, c * r * r, h / r, w / r))?)
}

/// Nearest-neighbour ×2 upsampling of an NCHW tensor.
pub fn upsample_nearest2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// 2×2 average pooling of an NCHW tensor.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot 2×2 pool {h}×{w}")));
    }
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.mean((3, 5))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_slice(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let x = Var::new(&[[0.3f64, -1.2, 2.0, 0.5]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[[1.0f64, -2.0, 0.5, 3.0]], &Device::Cpu).unwrap();
        let f = |x: &Tensor| (softmax_last(x).unwrap() * &w).unwrap().sum_all().unwrap();
        let g = f(&x).backward().unwrap().get(&x).unwrap().to_vec2::<f64>().unwrap();
        let base = x.to_vec2::<f64>().unwrap()[0].clone();
        for i in 0..4 {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fp = f(&Tensor::from_vec(p, (1, 4), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fm = f(&Tensor::from_vec(m, (1, 4), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            assert!(((fp - fm) / 2e-6 - g[0][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pixel_shuffle_is_a_bijection() {
        let x = t(&(0..2 * 8 * 3 * 3).map(|v| v as f32).collect::<Vec<_>>(), &[2, 8, 3, 3]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 2, 6, 6]);
        let back = pixel_unshuffle(&y, 2).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        // channel c·r² + i·r + j lands at (c, h·r + i, w·r + j)
        let y0 = y.get(0).unwrap().get(1).unwrap().to_vec2::<f32>().unwrap();
        let x0 = x.get(0).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(y0[1][2], x0[6][0][1]);
    }

    #[test]
    fn upsample_and_pool_are_adjoint_shapes() {
        let x = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
        let up = upsample_nearest2(&x).unwrap();
        assert_eq!(
            up.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let down = avg_pool2(&up).unwrap();
        assert_eq!(down.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn softplus_and_softmax() {
        let x = t(&[-50.0, 0.0, 50.0], &[3]);
        let sp = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(sp[0] >= 0.0 && sp[0] < 1e-20);
        assert!((sp[1] - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(sp[2], 50.0);
        let s = softmax_last(&t(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0], &[2, 3])).unwrap();
        for row in s.to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn leaky_relu_second_derivative_path() {
        let x = Var::from_tensor(&t(&[-2.0, 3.0], &[2])).unwrap();
        let y = leaky_relu(x.as_tensor(), 0.2).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec1::<f32>().unwrap();
        assert!((gx[0] - 0.2).abs() < 1e-7 && gx[1] == 1.0);
    }

    #[test]
    fn group_norm_normalises() {
        let x = t(&(0..2 * 4 * 3 * 3).map(|v| (v as f32).sin() * 3.0 + 1.0).collect::<Vec<_>>(), &[2, 4, 3, 3]);
        let y = group_norm_plain(&x, 2, 1e-5).unwrap();
        let g = y.reshape((2, 2, 18)).unwrap();
        for row in g.mean_keepdim(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!(row.abs() < 1e-5);
        }
        assert!(group_norm_plain(&x, 3, 1e-5).is_err());
    }
}
