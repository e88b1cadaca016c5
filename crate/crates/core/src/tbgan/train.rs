use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::Device;

use super::apa::{apa_update, APAState, DEFAULT_TARGET, DEFAULT_TRAVERSE_IMAGES};
use super::{gan_losses, sample_latents, ConvDiscriminator, DiffAugPolicy, StyleGenerator, TbGanConfig, R1_GAMMA};
use crate::batch::ImageBatch;
use crate::checkpoint::ModelCheckpoint;
use crate::dataset::{unit_batches, Unit};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, AdamConfig, NamedArray};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TbGanTrainConfig {
    pub units: u64,
    pub unit: Unit,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_betas: (f64, f64),
    pub r1_gamma: f64,
    pub policy: DiffAugPolicy,
    pub apa: bool,
    pub apa_target: f64,
    pub apa_traverse_images: f64,
    pub seed: u64,
}

impl TbGanTrainConfig {
    /// Two time-scale defaults: the discriminator learns ten times faster.
    pub fn with_defaults(units: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            units,
            unit: Unit::Epoch,
            batch_size,
            lr_generator: 1e-5,
            lr_discriminator: 1e-4,
            adam_betas: (0.0, 0.99),
            r1_gamma: R1_GAMMA,
            policy: DiffAugPolicy::default(),
            apa: true,
            apa_target: DEFAULT_TARGET,
            apa_traverse_images: DEFAULT_TRAVERSE_IMAGES,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbGanTraceRow {
    pub epoch: u64,
    pub g_loss: f64,
    pub d_loss: f64,
    /// Mean penalty over the unit's lazy steps, 0 when none fell in it.
    pub r1: f64,
    pub apa_p: f64,
    pub lambda_r: f64,
    pub wall_time_s: f64,
}

impl TbGanTraceRow {
    pub const HEADER: &'static str = "epoch,g_loss,d_loss,r1,apa_p,lambda_r,wall_time_s";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.g_loss, self.d_loss, self.r1, self.apa_p, self.lambda_r, self.wall_time_s
        )
    }
}

/// Simultaneous generator/discriminator Adam updates with APA feedback.
pub struct TbGanTrainer {
    arch: TbGanConfig,
    g: StyleGenerator,
    d: ConvDiscriminator,
    opt_g: Adam,
    opt_d: Adam,
    apa: APAState,
    cfg: TbGanTrainConfig,
    next_unit: u64,
}

impl TbGanTrainer {
    pub fn new(arch: TbGanConfig, cfg: TbGanTrainConfig, device: &Device) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        cfg.policy.validate()?;
        let g = StyleGenerator::new(arch.clone(), derive_seed(cfg.seed, "tbgan-g-weights", 0), device)?;
        let d = ConvDiscriminator::new(&arch, derive_seed(cfg.seed, "tbgan-d-weights", 0), device)?;
        let opt_g = Adam::new(g.params(), AdamConfig::new(cfg.lr_generator, cfg.adam_betas))?;
        let opt_d = Adam::new(d.params(), AdamConfig::new(cfg.lr_discriminator, cfg.adam_betas))?;
        let apa = APAState::new(cfg.batch_size, cfg.apa_target, cfg.apa_traverse_images)?;
        Ok(Self {
            arch,
            g,
            d,
            opt_g,
            opt_d,
            apa,
            cfg,
            next_unit: 0,
        })
    }

    /// Loads generator and discriminator weights from a finished run;
    /// optimizer and APA state stay fresh.
    pub fn load_pretrained(&mut self, ckpt: &ModelCheckpoint) -> Result<()> {
        ckpt.check_pipeline("tbgan")?;
        let arch = serde_json::to_value(&self.arch).map_err(|e| Error::Config(e.to_string()))?;
        ckpt.check_architecture(&arch)?;
        self.g.params().import(&ckpt.arrays, "g.")?;
        self.d.params().import(&ckpt.arrays, "d.")?;
        Ok(())
    }

    pub fn architecture(&self) -> &TbGanConfig {
        &self.arch
    }

    pub fn config(&self) -> &TbGanTrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &StyleGenerator {
        &self.g
    }

    pub fn discriminator(&self) -> &ConvDiscriminator {
        &self.d
    }

    pub fn apa(&self) -> &APAState {
        &self.apa
    }

    pub fn optimizer_steps(&self) -> (u64, u64) {
        (self.opt_g.steps_taken(), self.opt_d.steps_taken())
    }

    pub fn next_unit(&self) -> u64 {
        self.next_unit
    }

    pub fn is_done(&self) -> bool {
        self.next_unit >= self.cfg.units
    }

    /// Trains one unit; returns its trace row without wall time.
    pub fn train_unit(&mut self, reals: &ImageBatch) -> Result<TbGanTraceRow> {
        if reals.count() == 0 {
            return Err(Error::InvalidArgument("no training images".into()));
        }
        let device = self.g.params().device().clone();
        let shuffle = derive_seed(self.cfg.seed, "tbgan-shuffle", 0);
        let (mut gs, mut ds, mut rs) = (0.0, 0.0, 0.0);
        let (mut steps, mut r1_steps) = (0usize, 0usize);
        for (key, idx) in unit_batches(reals.count(), self.cfg.batch_size, shuffle, self.next_unit, self.cfg.unit) {
            let real = reals.select(&idx).to_tensor(&device)?;
            let z = sample_latents(idx.len(), self.arch.latent_dim, derive_seed(self.cfg.seed, "tbgan-latent", key), &device)?;
            let l = gan_losses(
                &self.g,
                &self.d,
                &real,
                &z,
                &self.cfg.policy,
                &self.apa,
                self.cfg.r1_gamma,
                key,
                self.cfg.seed,
            )?;
            let stage = format!("tb-gan step {key}");
            gs += nn::finite_scalar(&l.g_loss, &stage)?;
            ds += nn::finite_scalar(&l.d_loss, &stage)?;
            if let Some(r) = &l.r1 {
                rs += nn::finite_scalar(r, &stage)?;
                r1_steps += 1;
            }
            // both gradients are taken before either network changes
            let g_grads = l.g_loss.backward()?;
            let d_grads = l.d_loss.backward()?;
            self.opt_g.step(&g_grads)?;
            self.opt_d.step(&d_grads)?;
            if self.cfg.apa {
                self.apa = apa_update(&self.apa, &l.real_logits);
            }
            steps += 1;
        }
        self.next_unit += 1;
        let n = steps.max(1) as f64;
        Ok(TbGanTraceRow {
            epoch: self.next_unit,
            g_loss: gs / n,
            d_loss: ds / n,
            r1: if r1_steps > 0 { rs / r1_steps as f64 } else { 0.0 },
            apa_p: self.apa.p,
            lambda_r: self.apa.lambda_r,
            wall_time_s: 0.0,
        })
    }

    pub fn train(
        &mut self,
        reals: &ImageBatch,
        mut on_unit: impl FnMut(&Self, &TbGanTraceRow) -> Result<()>,
    ) -> Result<Vec<TbGanTraceRow>> {
        let start = Instant::now();
        let mut rows = Vec::new();
        while !self.is_done() {
            let mut row = self.train_unit(reals)?;
            row.wall_time_s = start.elapsed().as_secs_f64();
            on_unit(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn export_state(&self) -> Result<BTreeMap<String, NamedArray>> {
        let mut out = self.g.params().export("g.")?;
        out.extend(self.d.params().export("d.")?);
        out.extend(self.opt_g.export("opt_g.")?);
        out.extend(self.opt_d.export("opt_d.")?);
        Ok(out)
    }

    pub fn import_state(&mut self, arrays: &BTreeMap<String, NamedArray>, next_unit: u64, apa: APAState) -> Result<()> {
        self.g.params().import(arrays, "g.")?;
        self.d.params().import(arrays, "d.")?;
        self.opt_g.import(arrays, "opt_g.")?;
        self.opt_d.import(arrays, "opt_d.")?;
        self.apa = apa;
        self.next_unit = next_unit;
        Ok(())
    }
}
