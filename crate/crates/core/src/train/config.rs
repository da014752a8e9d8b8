use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::losses::LossWeights;
use crate::deform::SearchConfig;
use crate::error::{Error, Result};
use crate::nets::FieldConfig;
use crate::render::MarchConfig;

/// Everything a training run depends on. Stored as TOML; every field has
/// a default so partial files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Rays per optimizer step.
    pub rays_per_step: usize,
    /// Fraction of each batch drawn from foreground pixels.
    pub foreground_ratio: f64,
    /// Optimizer steps per frame visit; an epoch visits every frame once.
    pub steps_per_frame: usize,
    pub checkpoint_every: usize,
    /// Rays per gradient accumulation chunk. Chunks are reduced in a fixed
    /// order, so results do not depend on the thread count.
    pub chunk_size: usize,
    /// Train on the first `max_frames` frames only.
    pub max_frames: Option<usize>,
    pub background: [f64; 3],
    pub weights: LossWeights,
    pub optimizer: AdamConfig,
    pub fields: FieldConfig,
    pub march: MarchConfig,
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            rays_per_step: 512,
            foreground_ratio: 0.75,
            steps_per_frame: 1,
            checkpoint_every: 10,
            chunk_size: 16,
            max_frames: None,
            background: [1.0; 3],
            weights: LossWeights::default(),
            optimizer: AdamConfig::default(),
            fields: FieldConfig::default(),
            march: MarchConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step == 0 || self.chunk_size == 0 || self.steps_per_frame == 0 {
            return Err(Error::invalid("rays_per_step, chunk_size and steps_per_frame must be positive"));
        }
        if !(0.0..=1.0).contains(&self.foreground_ratio) {
            return Err(Error::invalid(format!(
                "foreground_ratio: expected a value in [0, 1], got {}",
                self.foreground_ratio
            )));
        }
        if self.march.n_samples == 0 {
            return Err(Error::invalid("march.n_samples must be positive"));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.fields.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Small networks and batches for desk-scale runs on one core.
    pub fn compact() -> Self {
        Self {
            rays_per_step: 128,
            fields: FieldConfig {
                pe_freqs: 4,
                geometry_depth: 4,
                geometry_width: 48,
                deformation_depth: 2,
                deformation_width: 32,
                texture_depth: 2,
                texture_width: 32,
                ..FieldConfig::default()
            },
            march: MarchConfig {
                n_samples: 32,
                bound_radius: Some(1.0),
                ..MarchConfig::default()
            },
            ..Self::default()
        }
    }
}
