//! Offline initialization: rollouts to a populated belief grid.

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapt::DiscrepancyGp;
use crate::config::Config;
use crate::dataset::{build_training_set, TrainingDatum};
use crate::dynamics::EpisodeBatch;
use crate::embedding::{train_mapping, tsne_embed, EmbeddedSet, MappingNetwork};
use crate::error::{Error, Result};
use crate::grid::{GridModel, GridSpec};
use crate::metric::distance_matrix;

/// Summary printed by `init`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub n_t: usize,
    pub kl: f64,
    pub kl_at_exaggeration_end: f64,
    pub train_rmse: f64,
    /// Bounding-box diagonal of the t-SNE embedding.
    pub embedding_diagonal: f64,
    pub populated_cells: usize,
}

/// Everything offline initialization produces.
#[derive(Debug, Clone)]
pub struct Initialized {
    pub training: Vec<TrainingDatum>,
    pub embedded: EmbeddedSet,
    pub net: MappingNetwork,
    pub grid: GridModel,
    pub gp: DiscrepancyGp,
    pub report: InitReport,
}

fn diagonal(points: &[Vec<f64>]) -> f64 {
    let mut sq = 0.0;
    for a in 0..2 {
        let lo = points.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        sq += (hi - lo) * (hi - lo);
    }
    sq.sqrt()
}

/// Builds training data, embeds it, fits the mapping network and computes
/// cell priors. Training members are placed where the network maps them, so
/// they sit in the same cells that later queries of the same input reach.
pub fn initialize(batch: &EpisodeBatch, cfg: &Config) -> Result<Initialized> {
    cfg.validate()?;
    let training = build_training_set(&batch.episodes, cfg.horizon, cfg.gamma, cfg.training_stride)?;
    let n_t = training.len();
    cfg.embedding.validate(n_t).map_err(|e| match e {
        Error::InsufficientData(msg) => Error::InsufficientData(format!("{msg}; generate more episodes")),
        other => other,
    })?;
    info!("training set: {n_t} segments");

    let dist = distance_matrix(&training, cfg.distance_weight)?;
    info!("distance matrix done (w_max {:.4e})", dist.w_max);
    let embedded = tsne_embed(&dist, &cfg.embedding)?;
    info!("t-SNE done, KL {:.4}", embedded.kl);

    let inputs: Vec<Vec<f64>> = training.iter().map(|d| d.segment.input.flatten()).collect();
    let net = train_mapping(&inputs, &embedded.points(), &cfg.network, cfg.seed)?;
    info!("mapping network RMSE {:.4}", net.train_rmse);

    let mapped = net.forward_many(&inputs)?;
    let spec = GridSpec::fit(&mapped, cfg.grid.cells, cfg.grid.margin, cfg.grid.cell_length)?;
    let lambdas: Vec<f64> = training.iter().map(|d| d.lambda).collect();
    let grid = GridModel::new(spec, cfg.belief_params(), &mapped, &lambdas, cfg.adapt.mu_ini)?;
    let gp = DiscrepancyGp::empty(cfg.adapt.gp.hyper(diagonal(&mapped)))?;

    let report = InitReport {
        n_t,
        kl: embedded.kl,
        kl_at_exaggeration_end: embedded.kl_at_exaggeration_end,
        train_rmse: net.train_rmse,
        embedding_diagonal: embedded.bounding_diagonal(),
        populated_cells: grid.populated_cells(),
    };
    Ok(Initialized {
        training,
        embedded,
        net,
        grid,
        gp,
        report,
    })
}
