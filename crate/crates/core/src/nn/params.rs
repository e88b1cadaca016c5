use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Flat little-endian `f32` array with its shape, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.clone(), device)?)
    }
}

/// Parameter initialisers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f32),
    /// Normal with the given standard deviation.
    Normal(f32),
    /// He-normal scaled by `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f32 },
}

/// Named trainable variables, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// Snapshot of every parameter under `prefix`.
    pub fn export(&self, prefix: &str) -> Result<BTreeMap<String, NamedArray>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((format!("{prefix}{k}"), NamedArray::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter from `arrays[prefix + name]`; every
    /// parameter must be present with a matching shape.
    pub fn import(&self, arrays: &BTreeMap<String, NamedArray>, prefix: &str) -> Result<()> {
        for (k, var) in &self.vars {
            let key = format!("{prefix}{k}");
            let arr = arrays
                .get(&key)
                .ok_or_else(|| Error::ConfigMismatch { keys: vec![key.clone()] })?;
            if arr.shape != var.dims() {
                return Err(Error::ConfigMismatch {
                    keys: vec![format!("{key} shape {:?} vs {:?}", arr.shape, var.dims())],
                });
            }
            var.set(&arr.to_tensor(&self.device)?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.import(&other.export("")?, "")
    }
}

/// Creates parameters under a hierarchical name prefix, drawing initial
/// values from a seeded stream.
pub struct ParamBuilder {
    store: ParamStore,
    prefix: Vec<String>,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl ParamBuilder {
    pub fn new(device: Device, seed: u64, label: &str) -> Self {
        Self::with_dtype(device, seed, label, DType::F32)
    }

    pub fn with_dtype(device: Device, seed: u64, label: &str, dtype: DType) -> Self {
        Self {
            store: ParamStore::new(device),
            prefix: Vec::new(),
            rng: rng::stream(seed, label, 0),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => rng::normal_vec(&mut self.rng, n).into_iter().map(|v| v * std).collect(),
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f32).sqrt();
                rng::normal_vec(&mut self.rng, n).into_iter().map(|v| v * std).collect()
            }
        };
        let t = Tensor::from_vec(values, shape.to_vec(), self.store.device())?.to_dtype(self.dtype)?;
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.store.insert(full, t)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
