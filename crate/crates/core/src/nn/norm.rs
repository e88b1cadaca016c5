//! Fused group normalisation with a per-channel affine part.
//!
//! The backward pass is computed on the host in one sweep and returned as
//! constant tensors, so this op supports first-order gradients only. Do not
//! place it inside a network that needs gradient penalties.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

struct Dims {
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
}

impl Dims {
    fn group_len(&self) -> usize {
        self.c / self.groups * self.hw
    }
}

fn host(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn slice_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("group norm expects contiguous inputs".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => return Err(candle_core::Error::Msg("group norm supports f32 and f64 only".into())),
    })
}

/// Per-group mean and reciprocal standard deviation.
fn stats(x: &[f64], d: &Dims, eps: f64) -> Vec<(f64, f64)> {
    x.chunks(d.group_len())
        .map(|g| {
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let v = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / g.len() as f64;
            (m, 1.0 / (v + eps).sqrt())
        })
        .collect()
}

impl GroupNormOp {
    fn dims(&self, shape: &[usize]) -> Dims {
        Dims {
            n: shape[0],
            c: shape[1],
            hw: shape[2..].iter().product(),
            groups: self.groups,
        }
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.dims(l1.dims());
        let x = slice_f64(s1, l1)?;
        let gamma = slice_f64(s2, l2)?;
        let beta = slice_f64(s3, l3)?;
        let st = stats(&x, &d, self.eps);
        let cpg = d.c / d.groups;
        let mut y = vec![0f64; x.len()];
        for ni in 0..d.n {
            for ci in 0..d.c {
                let (m, r) = st[ni * d.groups + ci / cpg];
                let base = (ni * d.c + ci) * d.hw;
                for i in base..base + d.hw {
                    y[i] = (x[i] - m) * r * gamma[ci] + beta[ci];
                }
            }
        }
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(y.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(y),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x_t: &Tensor,
        gamma_t: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = self.dims(x_t.dims());
        let x = host(x_t)?;
        let g = host(grad)?;
        let gamma = host(gamma_t)?;
        let st = stats(&x, &d, self.eps);
        let cpg = d.c / d.groups;
        let glen = d.group_len() as f64;
        let mut dx = vec![0f64; x.len()];
        let mut dgamma = vec![0f64; d.c];
        let mut dbeta = vec![0f64; d.c];
        for ni in 0..d.n {
            for gi in 0..d.groups {
                let (m, r) = st[ni * d.groups + gi];
                // means of dxhat and dxhat·xhat over the group
                let (mut s1, mut s2) = (0.0, 0.0);
                for ci in gi * cpg..(gi + 1) * cpg {
                    let base = (ni * d.c + ci) * d.hw;
                    for i in base..base + d.hw {
                        let xhat = (x[i] - m) * r;
                        let dxhat = g[i] * gamma[ci];
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgamma[ci] += g[i] * xhat;
                        dbeta[ci] += g[i];
                    }
                }
                let (s1, s2) = (s1 / glen, s2 / glen);
                for ci in gi * cpg..(gi + 1) * cpg {
                    let base = (ni * d.c + ci) * d.hw;
                    for i in base..base + d.hw {
                        let xhat = (x[i] - m) * r;
                        dx[i] = r * (g[i] * gamma[ci] - s1 - xhat * s2);
                    }
                }
            }
        }
        let dev = x_t.device();
        let dt = x_t.dtype();
        Ok((
            Some(Tensor::from_vec(dx, x_t.shape(), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, d.c, dev)?.to_dtype(gamma_t.dtype())?),
            Some(Tensor::from_vec(dbeta, d.c, dev)?.to_dtype(gamma_t.dtype())?),
        ))
    }
}

/// `γ ⊙ normalise(x) + β` with statistics per (image, channel group).
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 || groups == 0 || dims[1] % groups != 0 {
        return Err(Error::Shape(format!("cannot split {dims:?} into {groups} channel groups")));
    }
    if gamma.dims() != [dims[1]] || beta.dims() != [dims[1]] {
        return Err(Error::Shape(format!("affine parameters must have {} entries", dims[1])));
    }
    let op = GroupNormOp { groups, eps };
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::group_norm_plain;
    use candle_core::{Device, Var};

    fn seq(shape: &[usize], scale: f64, salt: usize) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| (((i + salt) * 7919 % 113) as f64 / 56.0 - 1.0) * scale).collect();
        Tensor::from_vec(v, shape.to_vec(), &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_composed_ops_and_their_gradients() {
        let x = Var::from_tensor(&seq(&[2, 6, 3, 3], 2.0, 0)).unwrap();
        let gamma = Var::from_tensor(&seq(&[6], 1.0, 5)).unwrap();
        let beta = Var::from_tensor(&seq(&[6], 1.0, 9)).unwrap();
        let probe = seq(&[2, 6, 3, 3], 1.0, 17);
        let fused = group_norm(&x, &gamma, &beta, 3, 1e-5).unwrap();
        let composed = group_norm_plain(&x, 3, 1e-5)
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, 6, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, 6, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&fused, &composed) < 1e-12);
        let ga = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (composed * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-10);
        }
    }
}
