//! The flat run configuration shared by the trainer, sampler and CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::SaConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::{ArchConfig, TRUNK_BLOCKS};
use crate::pyramid::PyramidConfig;
use crate::smoothing::SmoothingSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub min_size: usize,
    pub max_size: usize,
    pub scale_factor: f64,
    pub scales_cap: Option<usize>,

    pub base_channels: usize,
    pub max_channels: usize,
    pub feedback: bool,

    /// Number of coarsest scales carrying self-attention (`k`).
    pub sa_scales: usize,
    /// Trunk blocks followed by a self-attention block.
    pub sa_layers: Vec<usize>,
    /// Side of the pooled attention grid (`m`).
    pub sa_size: usize,
    pub sa_channel_reduction: usize,

    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_rec: Option<f64>,

    pub alpha: f32,
    pub lambda_gp: f32,

    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epochs: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    /// Fraction of the epochs after which both learning rates are multiplied
    /// by `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f32,
    pub noise_amp_base: f32,
    /// Initialize each scale from the trained scale above where shapes match.
    pub warm_start: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pyr = PyramidConfig::default();
        let sa = SaConfig::default();
        let loss = LossConfig::default();
        Self {
            seed: 0,
            min_size: pyr.min_size,
            max_size: pyr.max_size,
            scale_factor: pyr.scale_factor,
            scales_cap: None,
            base_channels: 32,
            max_channels: 128,
            feedback: true,
            sa_scales: sa.scales,
            sa_layers: sa.layers,
            sa_size: sa.size,
            sa_channel_reduction: sa.channel_reduction,
            sigma_min: 1.0,
            sigma_max: 3.0,
            sigma_rec: None,
            alpha: loss.alpha,
            lambda_gp: loss.lambda_gp,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 6000,
            g_steps: 1,
            d_steps: 1,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            noise_amp_base: 0.1,
            warm_start: true,
        }
    }
}

fn positive(field: &str, v: f32) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, "must be positive"))
    }
}

fn unit_open(field: &str, v: f32) -> Result<()> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(field, "must lie in [0, 1)"))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("<file>")
                .to_string();
            Error::Config { field, message: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Sets one field from a `key=value` style override. The value is read as
    /// a TOML literal, falling back to a bare string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) && !Self::optional_keys().contains(&key) {
            return Err(Error::config(key, "unknown field"));
        }
        table.insert(key.to_string(), value);
        let updated: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    fn optional_keys() -> &'static [&'static str] {
        &["scales_cap", "sigma_rec"]
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid().validate()?;
        self.sa().validate(TRUNK_BLOCKS)?;
        self.smoothing()?;
        self.loss().validate()?;
        if self.base_channels == 0 {
            return Err(Error::config("base_channels", "must be at least 1"));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::config("max_channels", "must be at least base_channels"));
        }
        positive("lr_g", self.lr_g)?;
        positive("lr_d", self.lr_d)?;
        unit_open("beta1", self.beta1)?;
        unit_open("beta2", self.beta2)?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.g_steps == 0 {
            return Err(Error::config("g_steps", "must be at least 1"));
        }
        if self.d_steps == 0 {
            return Err(Error::config("d_steps", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::config("lr_decay_at", "must lie in [0, 1]"));
        }
        positive("lr_decay_factor", self.lr_decay_factor)?;
        if !(self.noise_amp_base >= 0.0 && self.noise_amp_base.is_finite()) {
            return Err(Error::config("noise_amp_base", "must be non-negative"));
        }
        Ok(())
    }

    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            min_size: self.min_size,
            max_size: self.max_size,
            scale_factor: self.scale_factor,
            scales_cap: self.scales_cap,
        }
    }

    pub fn sa(&self) -> SaConfig {
        SaConfig {
            size: self.sa_size,
            channel_reduction: self.sa_channel_reduction,
            scales: self.sa_scales,
            layers: self.sa_layers.clone(),
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            base_channels: self.base_channels,
            max_channels: self.max_channels,
            feedback: self.feedback,
            attention: self.sa(),
        }
    }

    pub fn smoothing(&self) -> Result<SmoothingSpec> {
        SmoothingSpec::new(self.sigma_min, self.sigma_max, self.sigma_rec)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            lambda_gp: self.lambda_gp,
        }
    }

    /// Epoch at which the learning-rate step happens.
    pub fn decay_epoch(&self) -> usize {
        (self.lr_decay_at * self.epochs as f64).floor() as usize
    }
}
