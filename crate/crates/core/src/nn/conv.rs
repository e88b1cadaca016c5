//! Convolution as im2col followed by one matrix product.
//!
//! The unfold and its adjoint are custom ops whose gradients are each
//! other, so convolutions stay differentiable to any order.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn col_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.n * ho * wo)
    }

    /// Visits every (column-matrix offset, image offset) pair that lies
    /// inside the unpadded image.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let g = *self;
        let (ho, wo) = g.out_hw();
        let cols = g.n * ho * wo;
        for ci in 0..g.c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = ((ci * g.k + ky) * g.k + kx) * cols;
                    for ni in 0..g.n {
                        let img = (ni * g.c + ci) * g.h * g.w;
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src = img + iy as usize * g.w;
                            let dst = row + (ni * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    f(dst + ox, src + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg("im2col expects a contiguous input".into())),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

fn unfold<T: WithDType>(g: &Geometry, x: &[T]) -> Vec<T> {
    let (r, c) = g.col_shape();
    let mut out = vec![T::zero(); r * c];
    g.for_each(|d, s| out[d] = x[s]);
    out
}

fn fold<T: WithDType>(g: &Geometry, col: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    g.for_each(|d, s| out[s] += col[d]);
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from(g.col_shape());
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(g, contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(g, contiguous(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64 only".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(g, contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(g, contiguous(v, layout)?)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64 only".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D cross-correlation of (N, C, H, W) with (O, C, k, k) weights and
/// symmetric zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        return Err(Error::Shape(format!("conv weight {:?} for input {:?}", weight.dims(), x.dims())));
    }
    if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("kernel {k} does not fit input {h}×{w} with padding {pad}")));
    }
    let g = Geometry { n, c, h, w, k, stride, pad };
    let (ho, wo) = g.out_hw();
    let col = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((o, c * k * k))?.matmul(&col)?;
    Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919 % 113) as f64 / 56.0 - 1.0) * scale).collect();
        Tensor::from_vec(v, shape.to_vec(), &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_native_convolution() {
        for (k, stride, hw) in [(3, 1, 7), (3, 2, 8), (1, 1, 5), (9, 1, 6), (3, 2, 5)] {
            let x = seq(&[2, 3, hw, hw], 1.0);
            let w = seq(&[4, 3, k, k], 0.3);
            let a = conv2d(&x, &w, stride, k / 2).unwrap();
            let b = x.conv2d(&w, k / 2, stride, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            assert!(max_diff(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_native_convolution() {
        let x = Var::from_tensor(&seq(&[2, 2, 6, 6], 1.0)).unwrap();
        let w = Var::from_tensor(&seq(&[3, 2, 3, 3], 0.5)).unwrap();
        let ga = conv2d(&x, &w, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gb = x.conv2d(&w, 1, 2, 1, 1).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn second_order_gradient_of_linear_probe() {
        // d(x) = sum(conv(x, w)); ‖∇ₓd‖² depends on w, so the penalty must
        // backpropagate into the weights.
        let x = Var::from_tensor(&seq(&[1, 1, 4, 4], 1.0)).unwrap();
        let w = Var::from_tensor(&seq(&[1, 1, 3, 3], 0.5)).unwrap();
        let d = conv2d(&x, &w, 1, 1).unwrap().sum_all().unwrap();
        let gx = d.backward().unwrap().get(&x).unwrap().clone();
        let pen = gx.sqr().unwrap().sum_all().unwrap();
        let gw = pen.backward().unwrap();
        let g = gw.get(&w).expect("penalty must reach the weights");
        assert!(g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap() > 0.0);
        assert_eq!(g.dtype(), DType::F64);
    }
}
