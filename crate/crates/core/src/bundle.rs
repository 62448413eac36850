//! On-disk model: a directory of JSON files.
//!
//! | file | content |
//! |---|---|
//! | `config.json` | every hyperparameter |
//! | `mlp.json` | mapping network |
//! | `grid.json` | grid geometry, members and cell beliefs |
//! | `gpr.json` | discrepancy regression data |
//! | `training.json` | training segments and their t-SNE coordinates |
//! | `meta.json` | versions, seeds, digests, nominal system |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::DiscrepancyGp;
use crate::config::Config;
use crate::dataset::{DatasetFile, TrainingDatum};
use crate::dynamics::{SystemConfig, SystemKind};
use crate::embedding::MappingNetwork;
use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::json;
use crate::pipeline::{InitReport, Initialized};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub format_version: u32,
    pub crate_version: String,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub seed: u64,
    pub embedding_seed: u64,
    /// The nominal system the model was built from.
    pub system: SystemConfig,
    /// Planning horizon of the training episodes; real rollouts use it too.
    pub episode_steps: usize,
    pub init: InitReport,
    pub adapt_steps: usize,
    pub feedback_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingArchive {
    pub dataset: DatasetFile,
    /// t-SNE coordinates, one per training datum.
    pub embedding: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: Config,
    pub net: MappingNetwork,
    pub grid: GridModel,
    pub gp: DiscrepancyGp,
    pub archive: TrainingArchive,
    pub meta: Meta,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_bytes(cfg: &Config) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(cfg).map_err(|e| Error::Numerical(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

impl ModelBundle {
    pub fn from_init(
        init: Initialized,
        config: Config,
        system: SystemConfig,
        episode_steps: usize,
        dataset_sha256: String,
    ) -> Result<Self> {
        let meta = Meta {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(&config_bytes(&config)?),
            dataset_sha256,
            seed: config.seed,
            embedding_seed: config.embedding.seed,
            system: system.clone(),
            episode_steps,
            init: init.report,
            adapt_steps: 0,
            feedback_episodes: 0,
        };
        let archive = TrainingArchive {
            dataset: DatasetFile::from_training(
                system.kind.as_str(),
                config.horizon,
                config.gamma,
                config.training_stride,
                &init.training,
            ),
            embedding: init.embedded.points(),
        };
        Ok(ModelBundle {
            config,
            net: init.net,
            grid: init.grid,
            gp: init.gp,
            archive,
            meta,
        })
    }

    pub fn training(&self) -> Vec<TrainingDatum> {
        self.archive.dataset.training()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = config_bytes(&self.config)?;
        let mut meta = self.meta.clone();
        meta.config_sha256 = sha256_hex(&cfg);
        json::write_bytes(&dir.join("config.json"), &cfg)?;
        json::write_exact(&dir.join("mlp.json"), &self.net)?;
        json::write_exact(&dir.join("grid.json"), &self.grid)?;
        json::write_exact(&dir.join("gpr.json"), &self.gp)?;
        json::write_exact(&dir.join("training.json"), &self.archive)?;
        json::write_pretty(&dir.join("meta.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::invalid(format!("{} is not a model directory", dir.display())));
        }
        let cfg_path = dir.join("config.json");
        let cfg_bytes = read_bytes(&cfg_path)?;
        let meta_path = dir.join("meta.json");
        let meta: Meta = parse(&meta_path, &read_bytes(&meta_path)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "bundle format {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        if sha256_hex(&cfg_bytes) != meta.config_sha256 {
            return Err(Error::Incompatible(
                "config.json does not match the hash recorded in meta.json; rebuild the model after changing it".into(),
            ));
        }
        let config: Config = parse(&cfg_path, &cfg_bytes)?;
        config.validate()?;
        let net_path = dir.join("mlp.json");
        let net = MappingNetwork::from_json(&read_bytes(&net_path)?)?;
        let grid_path = dir.join("grid.json");
        let grid: GridModel = parse(&grid_path, &read_bytes(&grid_path)?)?;
        if grid.cells.len() != grid.spec.cell_count() {
            return Err(Error::invalid("grid.json cell table does not match its geometry"));
        }
        if grid.params != config.belief_params() {
            return Err(Error::Incompatible("grid.json belief parameters differ from config.json".into()));
        }
        let gp_path = dir.join("gpr.json");
        let mut gp: DiscrepancyGp = parse(&gp_path, &read_bytes(&gp_path)?)?;
        gp.restore()?;
        let archive_path = dir.join("training.json");
        let archive: TrainingArchive = parse(&archive_path, &read_bytes(&archive_path)?)?;
        if net.output_dim() != 2 {
            return Err(Error::Incompatible("mapping network must produce two coordinates".into()));
        }
        Ok(ModelBundle {
            config,
            net,
            grid,
            gp,
            archive,
            meta,
        })
    }

    /// Input width the network expects.
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Errors unless the model was built for systems of `kind`.
    pub fn check_system(&self, kind: SystemKind) -> Result<()> {
        let built = self.meta.system.kind;
        if kind != built {
            return Err(Error::Incompatible(format!("model was built for {built}, not {kind}")));
        }
        Ok(())
    }
}
