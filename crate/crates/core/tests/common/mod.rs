//! Helpers shared by the integration tests.

#![allow(dead_code)]

use saveri::bundle::ModelBundle;
use saveri::cli::adapt_bundle;
use saveri::config::Config;
use saveri::dynamics::{ClosedLoopSystem, EpisodeBatch, SystemConfig, Variant};
use saveri::eval::Assessor;
use saveri::pipeline::initialize;

pub const EPISODE_STEPS: usize = 60;

pub fn system(name: &str, variant: Variant) -> ClosedLoopSystem {
    ClosedLoopSystem::from_config(&SystemConfig::new(name, variant).unwrap()).unwrap()
}

/// Offline initialisation on `episodes` nominal rollouts.
pub fn build(name: &str, episodes: usize, seed: u64, config: Config) -> ModelBundle {
    let nominal = system(name, Variant::Nominal);
    let batch = EpisodeBatch::generate(&nominal, EPISODE_STEPS, seed, episodes).unwrap();
    let init = initialize(&batch, &config).unwrap();
    ModelBundle::from_init(init, config, batch.config.system.clone(), EPISODE_STEPS, String::new()).unwrap()
}

/// The bundle's own system in its real variant.
pub fn real_system(bundle: &ModelBundle) -> ClosedLoopSystem {
    ClosedLoopSystem::from_config(&bundle.meta.system.with_variant(Variant::Real)).unwrap()
}

pub fn adapt(bundle: &mut ModelBundle, episodes: usize, seed: u64) {
    let real = real_system(bundle);
    let k_u = bundle.config.adapt.k_u;
    adapt_bundle(bundle, &real, episodes, k_u, seed).unwrap();
}

pub fn assessor(bundle: &ModelBundle) -> Assessor<'_> {
    Assessor {
        net: &bundle.net,
        grid: &bundle.grid,
        horizon: bundle.config.horizon,
    }
}

/// Settings of the cart-pole accuracy benchmark: defaults except a longer
/// network fit.
pub fn cart_pole_config() -> Config {
    let mut cfg = Config::default();
    cfg.network.epochs = 1000;
    cfg
}
