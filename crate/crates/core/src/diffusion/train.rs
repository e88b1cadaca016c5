use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::{denoise_loss, DiffusionSchedule, UNet, UNetConfig};
use crate::batch::ImageBatch;
use crate::dataset::{augment, unit_batches, AugmentConfig, Unit};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, NamedArray};
use crate::rng::derive_seed;

/// Optimisation settings for diffusion finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTrainConfig {
    pub units: u64,
    pub unit: Unit,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTraceRow {
    pub epoch: u64,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

impl DiffusionTraceRow {
    pub const HEADER: &'static str = "epoch,mean_loss,wall_time_s";

    pub fn csv(&self) -> String {
        format!("{},{},{:.3}", self.epoch, self.mean_loss, self.wall_time_s)
    }
}

/// Resumable ε-MSE training of a [`UNet`] on an in-memory image set.
pub struct DiffusionTrainer {
    model: UNet,
    schedule: DiffusionSchedule,
    opt: Adam,
    cfg: DiffusionTrainConfig,
    next_unit: u64,
}

impl DiffusionTrainer {
    pub fn new(
        arch: UNetConfig,
        schedule: DiffusionSchedule,
        cfg: DiffusionTrainConfig,
        device: &Device,
    ) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let model = UNet::new(arch, derive_seed(cfg.seed, "diffusion-weights", 0), device)?;
        let opt = Adam::new(model.params(), AdamConfig::new(cfg.lr, cfg.adam_betas))?;
        Ok(Self {
            model,
            schedule,
            opt,
            cfg,
            next_unit: 0,
        })
    }

    pub fn model(&self) -> &UNet {
        &self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &DiffusionTrainConfig {
        &self.cfg
    }

    /// Index of the next unit (epoch or step) to run.
    pub fn next_unit(&self) -> u64 {
        self.next_unit
    }

    pub fn is_done(&self) -> bool {
        self.next_unit >= self.cfg.units
    }

    /// Runs one schedule unit and returns its mean loss.
    pub fn train_unit(&mut self, data: &ImageBatch) -> Result<f64> {
        if data.count() == 0 {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        let unit = self.next_unit;
        let shuffle = derive_seed(self.cfg.seed, "diffusion-shuffle", 0);
        let device = self.model.params().device().clone();
        let mut total = 0.0;
        let mut batches = 0usize;
        for (key, idx) in unit_batches(data.count(), self.cfg.batch_size, shuffle, unit, self.cfg.unit) {
            let mut x = data.select(&idx);
            if let Some(a) = &self.cfg.augment {
                x = augment(&x, a, derive_seed(self.cfg.seed, "diffusion-augment", key));
            }
            let x = x.to_tensor(&device)?;
            let loss = denoise_loss(&self.model, &x, &self.schedule, derive_seed(self.cfg.seed, "diffusion-loss", key))
                .map_err(|e| match e {
                    Error::Numeric { stage, detail } => Error::numeric(format!("{stage} (unit {unit}, batch {key})"), detail),
                    other => other,
                })?;
            let v = nn::finite_scalar(&loss, "diffusion training")?;
            let grads = loss.backward()?;
            self.opt.step(&grads)?;
            total += v;
            batches += 1;
        }
        self.next_unit += 1;
        Ok(total / batches.max(1) as f64)
    }

    /// Trains until the configured number of units, calling `on_unit` after
    /// each with its trace row.
    pub fn train(
        &mut self,
        data: &ImageBatch,
        mut on_unit: impl FnMut(&Self, &DiffusionTraceRow) -> Result<()>,
    ) -> Result<Vec<DiffusionTraceRow>> {
        let start = Instant::now();
        let mut rows = Vec::new();
        while !self.is_done() {
            let mean_loss = self.train_unit(data)?;
            let row = DiffusionTraceRow {
                epoch: self.next_unit,
                mean_loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_unit(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Model weights under `model.` and optimiser moments under `opt.`.
    pub fn export_state(&self) -> Result<BTreeMap<String, NamedArray>> {
        let mut out = self.model.params().export("model.")?;
        out.extend(self.opt.export("opt.")?);
        Ok(out)
    }

    pub fn import_state(&mut self, arrays: &BTreeMap<String, NamedArray>, next_unit: u64) -> Result<()> {
        self.model.params().import(arrays, "model.")?;
        self.opt.import(arrays, "opt.")?;
        self.next_unit = next_unit;
        Ok(())
    }
}
