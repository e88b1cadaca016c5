//! Run configuration: a TOML document with unknown keys rejected, dotted
//! `key=value` overrides, and the published training protocol as defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentConfig, Plane, Unit};
use crate::diffusion::UNetConfig;
use crate::error::{Error, Result};
use crate::superres::SrConfig;
use crate::tbgan::{DiffAugPolicy, TbGanConfig, DEFAULT_TARGET, DEFAULT_TRAVERSE_IMAGES, R1_GAMMA};

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "USGEN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    /// Diffusion, histogram matching, then ×2 super-resolution.
    Dsr,
    /// Transformer GAN.
    Tbgan,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Dsr => "dsr",
            Pipeline::Tbgan => "tbgan",
        }
    }
}

/// Settings of the diffusion + super-resolution pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsrSection {
    /// U-Net preset: "standard" or "tiny".
    pub unet: String,
    /// Diffusion resolution; super-resolution doubles it.
    pub low_resolution: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub diffusion_lr: f64,
    pub sr_epochs: u64,
    /// Super-resolution preset: "standard" or "tiny".
    pub sr: String,
    pub lambda_adv: f64,
    pub feature_content: bool,
    pub histmatch: bool,
    /// Real images pooled for the reference intensity CDF (all when unset).
    pub reference_samples: Option<usize>,
    /// Diffusion checkpoint whose weights start the finetuning.
    pub pretrained: Option<PathBuf>,
}

impl Default for DsrSection {
    fn default() -> Self {
        Self {
            unet: "standard".into(),
            low_resolution: 128,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            diffusion_lr: 1e-4,
            sr_epochs: 200,
            sr: "standard".into(),
            lambda_adv: 1e-3,
            feature_content: false,
            histmatch: true,
            reference_samples: None,
            pretrained: None,
        }
    }
}

impl DsrSection {
    pub fn high_resolution(&self) -> usize {
        2 * self.low_resolution
    }

    pub fn unet_config(&self, channels: usize) -> Result<UNetConfig> {
        UNetConfig::preset(&self.unet, self.low_resolution, channels)
    }

    pub fn sr_config(&self, channels: usize) -> Result<SrConfig> {
        SrConfig::preset(&self.sr, channels)
    }
}

/// Settings of the transformer GAN pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TbGanSection {
    /// Architecture preset: "standard" or "tiny".
    pub preset: String,
    /// Overrides the preset's output size.
    pub resolution: Option<usize>,
    /// Weights of an earlier run to finetune (transfer between planes).
    pub init_checkpoint: Option<PathBuf>,
    pub r1_gamma: f64,
    pub apa: bool,
    pub apa_target: f64,
    pub apa_traverse_images: f64,
    pub diffaug: DiffAugPolicy,
}

impl Default for TbGanSection {
    fn default() -> Self {
        Self {
            preset: "standard".into(),
            resolution: None,
            init_checkpoint: None,
            r1_gamma: R1_GAMMA,
            apa: true,
            apa_target: DEFAULT_TARGET,
            apa_traverse_images: DEFAULT_TRAVERSE_IMAGES,
            diffaug: DiffAugPolicy::default(),
        }
    }
}

impl TbGanSection {
    pub fn architecture(&self, channels: usize) -> Result<TbGanConfig> {
        let mut arch = TbGanConfig::preset(&self.preset, channels)?;
        if let Some(r) = self.resolution {
            if r != arch.resolution {
                // one discriminator stage per halving; extend or trim the widths
                let halvings = (r.max(8).trailing_zeros() as usize).saturating_sub(2).max(1);
                let last = *arch.disc_widths.last().unwrap_or(&64);
                arch.disc_widths.resize(halvings, last);
                arch.resolution = r;
            }
        }
        arch.validate()?;
        Ok(arch)
    }
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pipeline: Pipeline,
    pub plane: Plane,
    /// Directory scanned for training images of `plane`.
    pub data_root: PathBuf,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub unit: Unit,
    /// Diffusion finetuning for `dsr`, GAN training for `tbgan`.
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_betas: (f64, f64),
    /// Resolved at load time: explicit value, then `USGEN_SEED`, then 0.
    pub seed: Option<u64>,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Synthesized images per FID evaluation.
    pub eval_samples: usize,
    /// Real images per FID evaluation (all when unset).
    #[serde(default)]
    pub fid_real_samples: Option<usize>,
    /// "tiny" or a path to an extractor checkpoint.
    #[serde(default = "default_extractor")]
    pub extractor: String,
    /// Checkpoint of an interrupted run of this config to continue.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Flip/zoom/rotation for the diffusion and super-resolution stages.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub dsr: DsrSection,
    #[serde(default)]
    pub tbgan: TbGanSection,
}

fn default_channels() -> usize {
    1
}

fn default_extractor() -> String {
    "tiny".into()
}

impl TrainConfig {
    /// The diffusion + super-resolution protocol: 10000 diffusion epochs at
    /// 128×128, then 200 super-resolution epochs to 256×256.
    pub fn default_dsr(data_root: impl Into<PathBuf>) -> Self {
        Self {
            pipeline: Pipeline::Dsr,
            plane: Plane::TransCerebellum,
            data_root: data_root.into(),
            channels: 1,
            unit: Unit::Epoch,
            epochs: 10_000,
            batch_size: 16,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            adam_betas: (0.9, 0.999),
            seed: None,
            eval_every: 10,
            checkpoint_every: 10,
            eval_samples: 408,
            fid_real_samples: None,
            extractor: default_extractor(),
            resume: None,
            augment: Some(AugmentConfig::default()),
            dsr: DsrSection::default(),
            tbgan: TbGanSection::default(),
        }
    }

    /// Transformer GAN pretraining: 500 epochs on the trans-thalamic plane
    /// with discriminator/generator learning rates 1e-4/1e-5.
    pub fn default_tbgan(data_root: impl Into<PathBuf>) -> Self {
        Self {
            pipeline: Pipeline::Tbgan,
            plane: Plane::TransThalamic,
            epochs: 500,
            lr_generator: 1e-5,
            lr_discriminator: 1e-4,
            adam_betas: (0.0, 0.99),
            augment: None,
            ..Self::default_dsr(data_root)
        }
    }

    /// Finetuning of a pretrained transformer GAN: 200 further epochs on
    /// the trans-cerebellum plane.
    pub fn default_tbgan_finetune(data_root: impl Into<PathBuf>, pretrained: impl Into<PathBuf>) -> Self {
        let mut c = Self::default_tbgan(data_root);
        c.plane = Plane::TransCerebellum;
        c.epochs = 200;
        c.tbgan.init_checkpoint = Some(pretrained.into());
        c
    }

    /// Parses TOML, applies `key=value` overrides (dotted keys address
    /// sections) and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills `seed`: an explicit flag wins, then the configured value, then
    /// the environment fallback, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        let seed = match (flag, self.seed, env) {
            (Some(s), _, _) | (None, Some(s), _) => s,
            (None, None, Some(v)) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            (None, None, None) => 0,
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0 && self.dsr.diffusion_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam_betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be at least 1".into());
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        match self.pipeline {
            Pipeline::Dsr => {
                self.dsr.unet_config(self.channels)?.validate()?;
                self.dsr.sr_config(self.channels)?;
                crate::diffusion::DiffusionSchedule::linear(self.dsr.timesteps, self.dsr.beta_start, self.dsr.beta_end)?;
                if self.dsr.lambda_adv < 0.0 {
                    return bad("lambda_adv must be non-negative".into());
                }
            }
            Pipeline::Tbgan => {
                self.tbgan.architecture(self.channels)?;
                self.tbgan.diffaug.validate()?;
                if self.tbgan.r1_gamma < 0.0 {
                    return bad("r1_gamma must be non-negative".into());
                }
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c=value` inside `table`, creating intermediate sections.
/// Values are read as TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArgument(format!("override key {key:?} is malformed")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override key {key:?}: {p} is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
