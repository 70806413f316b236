use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::ApEnParams;
use crate::embedder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gzsl_model::{LatentConfig, RunMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaKeyword {
    #[serde(rename = "sweep")]
    Sweep,
}

/// Either a fixed stacking constant or `"sweep"`, which selects the value
/// maximizing the validation harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSetting {
    Fixed(f64),
    Keyword(GammaKeyword),
}

impl Default for GammaSetting {
    fn default() -> Self {
        GammaSetting::Keyword(GammaKeyword::Sweep)
    }
}

/// Flat run configuration. Every field has a default; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Data files; rows of all files are pooled.
    pub dataset: Vec<PathBuf>,
    pub seed: u64,
    pub mode: RunMode,
    pub normalize: bool,

    pub repr_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub mask_probability: f64,
    pub encoder_batch_size: usize,
    pub encoder_epochs: usize,
    pub hierarchical: bool,
    pub encoder_lr: f64,

    pub latent_filters: Vec<usize>,
    pub latent_kernel_sizes: Vec<usize>,
    pub latent_pool: usize,
    pub latent_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub gzsl_epochs: usize,
    pub gzsl_batch_size: usize,
    pub gzsl_lr: f64,

    pub tau: f64,
    pub gamma: GammaSetting,
    pub apen_m: usize,
    pub apen_r_factor: f64,
    pub out: PathBuf,
    pub dump_attributes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let l = LatentConfig::default();
        let a = ApEnParams::default();
        RunConfig {
            dataset: Vec::new(),
            seed: 0,
            mode: RunMode::Full,
            normalize: true,
            repr_dim: e.repr_dim,
            hidden_dim: e.hidden_dim,
            num_blocks: e.num_blocks,
            kernel_size: e.kernel_size,
            mask_probability: e.mask_probability,
            encoder_batch_size: e.batch_size,
            encoder_epochs: e.epochs,
            hierarchical: e.hierarchical,
            encoder_lr: e.lr,
            latent_filters: l.filters,
            latent_kernel_sizes: l.kernel_sizes,
            latent_pool: l.pool_size,
            latent_dim: l.latent_dim,
            classifier_hidden: l.classifier_hidden,
            gzsl_epochs: l.epochs,
            gzsl_batch_size: l.batch_size,
            gzsl_lr: l.lr,
            tau: 1.0,
            gamma: GammaSetting::default(),
            apen_m: a.m,
            apen_r_factor: a.r_factor,
            out: PathBuf::from("runs/default"),
            dump_attributes: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            repr_dim: self.repr_dim,
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            kernel_size: self.kernel_size,
            mask_probability: self.mask_probability,
            batch_size: self.encoder_batch_size,
            epochs: self.encoder_epochs,
            hierarchical: self.hierarchical,
            lr: self.encoder_lr,
        }
    }

    pub fn latent(&self) -> LatentConfig {
        LatentConfig {
            filters: self.latent_filters.clone(),
            kernel_sizes: self.latent_kernel_sizes.clone(),
            pool_size: self.latent_pool,
            latent_dim: self.latent_dim,
            classifier_hidden: self.classifier_hidden.clone(),
            epochs: self.gzsl_epochs,
            batch_size: self.gzsl_batch_size,
            lr: self.gzsl_lr,
        }
    }

    pub fn apen(&self) -> ApEnParams {
        ApEnParams {
            m: self.apen_m,
            r_factor: self.apen_r_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_embedder() {
            self.encoder().validate()?;
        }
        self.latent().validate()?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if let GammaSetting::Fixed(g) = self.gamma {
            if !g.is_finite() {
                return Err(Error::Config("gamma must be finite".into()));
            }
        }
        if self.apen_m < 1 || !(self.apen_r_factor >= 0.0) {
            return Err(Error::Config("apen_m must be >= 1 and apen_r_factor >= 0".into()));
        }
        Ok(())
    }
}
