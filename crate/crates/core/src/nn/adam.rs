use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use candle_core::backprop::GradStore;
use serde::{Deserialize, Serialize};

use super::params::{NamedArray, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, (beta1, beta2): (f64, f64)) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam over the variables of one [`ParamStore`]. Moment estimates and the
/// step counter are exportable so training resumes bit-exactly.
pub struct Adam {
    cfg: AdamConfig,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", cfg.lr)));
        }
        let slots = params
            .vars()
            .iter()
            .map(|(k, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok((
                    k.clone(),
                    Slot {
                        var: var.clone(),
                        m: z.clone(),
                        v: z,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients in `grads`; variables without a
    /// gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor().detach() - (update * lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Moments as `{prefix}m.{name}` / `{prefix}v.{name}` plus a one-element
    /// `{prefix}step` array.
    pub fn export(&self, prefix: &str) -> Result<BTreeMap<String, NamedArray>> {
        let mut out = BTreeMap::new();
        for (k, slot) in &self.slots {
            out.insert(format!("{prefix}m.{k}"), NamedArray::from_tensor(&slot.m)?);
            out.insert(format!("{prefix}v.{k}"), NamedArray::from_tensor(&slot.v)?);
        }
        // f32 holds integers exactly up to 2^24
        if self.step >= 1 << 24 {
            return Err(Error::InvalidArgument(format!(
                "optimizer step {} too large to checkpoint",
                self.step
            )));
        }
        out.insert(
            format!("{prefix}step"),
            NamedArray {
                shape: vec![1],
                data: vec![self.step as f32],
            },
        );
        Ok(out)
    }

    pub fn import(&mut self, arrays: &BTreeMap<String, NamedArray>, prefix: &str) -> Result<()> {
        let missing = |k: String| Error::ConfigMismatch { keys: vec![k] };
        for (k, slot) in self.slots.iter_mut() {
            let device = slot.m.device().clone();
            let dtype = slot.m.dtype();
            for (which, target) in [("m", &mut slot.m), ("v", &mut slot.v)] {
                let key = format!("{prefix}{which}.{k}");
                let arr = arrays.get(&key).ok_or_else(|| missing(key.clone()))?;
                if arr.shape != target.dims() {
                    return Err(missing(format!("{key} shape")));
                }
                *target = arr.to_tensor(&device)?.to_dtype(dtype)?;
            }
        }
        let key = format!("{prefix}step");
        let step = arrays.get(&key).ok_or_else(|| missing(key))?;
        self.step = step.data.first().map(|&v| v as u64).unwrap_or(0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use candle_core::Device;

    fn quadratic_store() -> (ParamStore, Tensor) {
        let mut b = ParamBuilder::new(Device::Cpu, 0, "adam");
        let w = b.param("w", &[3], Init::Const(1.0)).unwrap();
        (b.finish(), w)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (store, w) = quadratic_store();
        let mut opt = Adam::new(&store, AdamConfig::new(0.01, (0.9, 0.999))).unwrap();
        let loss = (w.sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        for v in w.to_vec1::<f32>().unwrap() {
            assert!((v - 0.99).abs() < 1e-6);
        }
    }

    #[test]
    fn minimises_quadratic_and_resumes_exactly() {
        let run = |split: Option<usize>| {
            let (store, w) = quadratic_store();
            let mut opt = Adam::new(&store, AdamConfig::new(0.05, (0.9, 0.999))).unwrap();
            for i in 0..40 {
                if split == Some(i) {
                    let saved_w = store.export("").unwrap();
                    let saved_o = opt.export("opt.").unwrap();
                    let (store2, w2) = quadratic_store();
                    store2.import(&saved_w, "").unwrap();
                    let mut opt2 = Adam::new(&store2, AdamConfig::new(0.05, (0.9, 0.999))).unwrap();
                    opt2.import(&saved_o, "opt.").unwrap();
                    for _ in i..40 {
                        let loss = (&w2 - 0.25).unwrap().sqr().unwrap().sum_all().unwrap();
                        opt2.step(&loss.backward().unwrap()).unwrap();
                    }
                    return w2.to_vec1::<f32>().unwrap();
                }
                let loss = (&w - 0.25).unwrap().sqr().unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap()).unwrap();
            }
            w.to_vec1::<f32>().unwrap()
        };
        let straight = run(None);
        assert!(straight.iter().all(|v| (v - 0.25).abs() < 0.2));
        let resumed = run(Some(17));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&straight), bits(&resumed));
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let (store, _) = quadratic_store();
        assert!(Adam::new(&store, AdamConfig::new(0.0, (0.9, 0.999))).is_err());
    }
}
