//! All hyperparameters of a model, stored as `config.json` in the bundle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::embedding::{EmbeddingConfig, NetConfig};
use crate::error::{Error, Result};
use crate::grid::{BeliefParams, DecayMode};
use crate::json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub cells: [usize; 2],
    /// Fraction of the embedding extent added on each side in automatic mode.
    pub margin: f64,
    /// Fixed cell length; `None` derives it from the embedding extent.
    pub cell_length: Option<f64>,
    /// Training members a cell needs before it gets a prior.
    pub k_min: usize,
    pub decay: DecayMode,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cells: [14, 14],
            margin: 0.05,
            cell_length: None,
            k_min: 5,
            decay: DecayMode::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Assessment horizon in steps.
    #[serde(rename = "H")]
    pub horizon: usize,
    pub gamma: f64,
    /// Weight of the score difference in the segment distance.
    pub distance_weight: f64,
    /// Spacing of segment starts within an episode.
    pub training_stride: usize,
    pub feedback_stride: usize,
    pub embedding: EmbeddingConfig,
    pub network: NetConfig,
    pub grid: GridConfig,
    pub adapt: AdaptConfig,
    /// Assessments below this trigger the recovery policy.
    pub threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            horizon: 10,
            gamma: 0.99,
            distance_weight: 0.01,
            training_stride: 10,
            feedback_stride: 10,
            embedding: EmbeddingConfig::default(),
            network: NetConfig::default(),
            grid: GridConfig::default(),
            adapt: AdaptConfig::default(),
            threshold: 0.6,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Config = json::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.training_stride == 0 || self.feedback_stride == 0 {
            return Err(Error::invalid("horizon and strides must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1]"));
        }
        if !(self.distance_weight >= 0.0) {
            return Err(Error::invalid("distance weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("threshold must lie in [0, 1]"));
        }
        if self.embedding.n_y != 2 {
            return Err(Error::invalid("the belief grid is two-dimensional; set embedding.n_y to 2"));
        }
        if self.grid.cells[0] == 0 || self.grid.cells[1] == 0 || !(self.grid.margin >= 0.0) {
            return Err(Error::invalid("grid needs cells on both axes and a non-negative margin"));
        }
        if let Some(l) = self.grid.cell_length {
            if !(l > 0.0) {
                return Err(Error::invalid("cell length must be positive"));
            }
        }
        if self.network.hidden.contains(&0) || self.network.epochs == 0 {
            return Err(Error::invalid("network layers and epochs must be non-zero"));
        }
        self.adapt.validate()
    }

    pub fn belief_params(&self) -> BeliefParams {
        BeliefParams {
            k_min: self.grid.k_min,
            alpha: self.adapt.alpha,
            beta: self.adapt.beta,
            decay: self.grid.decay,
        }
    }
}
