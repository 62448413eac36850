//! Online adaptation from real-system feedback.

mod gp;

pub use gp::{DiscrepancyGp, GpHyper, Prediction, MAX_JITTER};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeedbackDatum;
use crate::embedding::{map_input, MappingNetwork};
use crate::error::{Error, Result};
use crate::grid::{GridModel, SharedGrid, TrainingMember};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Length scale as a fraction of the embedding's bounding-box diagonal.
    pub length_scale_factor: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Most pairs kept; the oldest are dropped beyond this.
    pub cap: usize,
    /// Re-select hyperparameters by marginal likelihood at every step.
    pub grid_search: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            length_scale_factor: 0.1,
            signal_variance: 0.25,
            noise_variance: 1e-4,
            cap: 2000,
            grid_search: false,
        }
    }
}

impl GpConfig {
    pub fn hyper(&self, diagonal: f64) -> GpHyper {
        let length = self.length_scale_factor * diagonal;
        GpHyper {
            length_scale: if length > 0.0 { length } else { self.length_scale_factor },
            signal_variance: self.signal_variance,
            noise_variance: self.noise_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub sigma_thre: f64,
    pub mu_min: f64,
    pub mu_ini: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Feedback data per adaptation step.
    pub k_u: usize,
    pub gp: GpConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            sigma_thre: 0.3,
            mu_min: 0.1,
            mu_ini: 0.3,
            alpha: 0.4,
            beta: 0.3,
            k_u: 40,
            gp: GpConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.mu_min < self.mu_ini) || !unit(self.mu_min) || !unit(self.mu_ini) {
            return Err(Error::invalid("need 0 <= mu_min < mu_ini <= 1"));
        }
        if !unit(self.beta) || !(self.alpha >= 0.0) || !(self.sigma_thre >= 0.0) {
            return Err(Error::invalid("alpha and sigma_thre must be non-negative, beta in [0, 1]"));
        }
        if self.k_u == 0 || self.gp.cap == 0 {
            return Err(Error::invalid("k_u and the regression cap must be positive"));
        }
        Ok(())
    }
}

/// New uncertainty of a training datum given the discrepancy prediction at
/// its embedding.
pub fn reweighted_uncertainty(pred: Prediction, cfg: &AdaptConfig) -> f64 {
    if pred.std <= cfg.sigma_thre {
        cfg.mu_min + pred.mean.clamp(0.0, 1.0) * (1.0 - cfg.mu_min)
    } else {
        cfg.mu_ini
    }
}

/// Re-weights every training member from the regression. Returns how many
/// members passed the confidence gate.
pub fn update_training_uncertainty(members: &mut [TrainingMember], gp: &DiscrepancyGp, cfg: &AdaptConfig) -> usize {
    let updated: Vec<(f64, bool)> = members
        .par_iter()
        .map(|m| {
            if gp.std_at_most(&m.y, cfg.sigma_thre) {
                let mean = gp.raw_mean(&m.y).clamp(0.0, 1.0);
                (cfg.mu_min + mean * (1.0 - cfg.mu_min), true)
            } else {
                (cfg.mu_ini, false)
            }
        })
        .collect();
    let mut gated = 0;
    for (m, (mu, pass)) in members.iter_mut().zip(updated) {
        m.mu = mu;
        gated += pass as usize;
    }
    gated
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub cell: [usize; 2],
    pub before: f64,
    pub after: f64,
}

/// One line of the adaptation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub step: usize,
    pub batch: usize,
    pub skipped: usize,
    pub n_f: usize,
    pub gp_size: usize,
    pub gp_dropped: usize,
    pub hyper: GpHyper,
    pub jitter: f64,
    pub reweighted: usize,
    /// Cells whose safe mass moved by more than 0.05.
    pub deltas: Vec<CellDelta>,
}

/// Logged when a cell's safe mass moves by more than this in one step.
pub const DELTA_REPORT: f64 = 0.05;

/// Folds one batch of feedback into the model and regression. An empty
/// batch leaves both untouched and returns `None`.
pub fn adaptation_step(
    model: &mut GridModel,
    gp: &mut DiscrepancyGp,
    net: &MappingNetwork,
    batch: &[FeedbackDatum],
    cfg: &AdaptConfig,
    step: usize,
) -> Result<Option<AdaptLog>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let mut points = Vec::with_capacity(batch.len());
    let mut kept = Vec::with_capacity(batch.len());
    for (i, d) in batch.iter().enumerate() {
        match map_input(net, &d.segment.input) {
            Ok(y) if y.len() == 2 && y.iter().all(|v| v.is_finite()) => {
                points.push([y[0], y[1]]);
                kept.push(d);
            }
            Ok(_) => warn!("feedback datum {i} of step {step} has a non-finite embedding; skipped"),
            Err(e) => warn!("feedback datum {i} of step {step} skipped: {e}"),
        }
    }
    let skipped = batch.len() - kept.len();
    let before: Vec<f64> = model.cells.iter().map(|c| c.combined.b_safe).collect();

    let targets: Vec<f64> = kept.iter().map(|d| d.discrepancy()).collect();
    let dropped = gp.extend(&points, &targets, cfg.gp.cap)?;
    if cfg.gp.grid_search {
        gp.grid_search()?;
    }

    let reweighted = update_training_uncertainty(&mut model.training, gp, cfg);
    model.recompute_priors();
    for (p, d) in points.iter().zip(&kept) {
        model.add_feedback(p, d.lambda, d.lambda_hat)?;
    }
    model.recompute_feedback();
    model.recompute_combined();

    let deltas = model
        .cells
        .iter()
        .zip(&before)
        .enumerate()
        .filter(|(_, (c, b))| (c.combined.b_safe - **b).abs() > DELTA_REPORT)
        .map(|(i, (c, b))| CellDelta {
            cell: model.spec.unflat(i),
            before: *b,
            after: c.combined.b_safe,
        })
        .collect();
    Ok(Some(AdaptLog {
        step,
        batch: batch.len(),
        skipped,
        n_f: model.n_f(),
        gp_size: gp.len(),
        gp_dropped: dropped,
        hyper: gp.hyper,
        jitter: gp.jitter,
        reweighted,
        deltas,
    }))
}

/// Runs one step on a copy of the published grid and publishes the result.
pub fn adapt_and_publish(
    shared: &SharedGrid,
    gp: &mut DiscrepancyGp,
    net: &MappingNetwork,
    batch: &[FeedbackDatum],
    cfg: &AdaptConfig,
    step: usize,
) -> Result<Option<AdaptLog>> {
    let mut next = (*shared.snapshot()).clone();
    let log = adaptation_step(&mut next, gp, net, batch, cfg, step)?;
    if log.is_some() {
        shared.publish(next);
    }
    Ok(log)
}
