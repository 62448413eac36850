use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{plan_trajectory, ClosedLoopSystem, DesiredTrajectory, Disturbance, SafeSet, SystemConfig};
use crate::error::{Error, Result};
use crate::json;

/// A non-zero impulse applied during the step starting at `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEvent {
    pub step: usize,
    pub impulse: Vec<f64>,
}

/// One closed-loop rollout.
///
/// `states` holds `s_0 ..= s_{T'}` and `outputs` the matching `g(s_k)`. For a
/// safe episode `T' = T`; otherwise `T'` is the index of the first state
/// outside the safe set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: usize,
    pub seed: u64,
    pub initial_state: Vec<f64>,
    pub desired: DesiredTrajectory,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub termination: usize,
    pub safe: bool,
    pub disturbances: Vec<DisturbanceEvent>,
    /// Set when the state stopped being finite; offending entries are stored
    /// as `±f64::MAX`.
    #[serde(default)]
    pub diverged: bool,
}

impl Episode {
    pub fn horizon(&self) -> usize {
        self.desired.len()
    }

    /// Largest segment start: `T'` for unsafe episodes, `T - 1` for safe ones.
    pub fn last_start(&self) -> usize {
        if self.safe {
            self.horizon() - 1
        } else {
            self.termination
        }
    }
}

fn sanitize(state: &mut [f64]) {
    for v in state.iter_mut() {
        if v.is_nan() {
            *v = f64::MAX;
        } else if v.is_infinite() {
            *v = f64::MAX.copysign(*v);
        }
    }
}

/// Runs the closed loop from `initial` along `desired`, stopping at the first
/// unsafe state. `disturbance(k)` supplies the disturbance of step `k`.
pub fn simulate<F>(
    system: &ClosedLoopSystem,
    safe_set: &SafeSet,
    initial: &[f64],
    desired: &DesiredTrajectory,
    mut disturbance: F,
) -> Result<Episode>
where
    F: FnMut(usize) -> Disturbance,
{
    if desired.is_empty() {
        return Err(Error::invalid("desired trajectory is empty"));
    }
    if initial.len() != system.state_dim() {
        return Err(Error::invalid("initial state has wrong dimension"));
    }
    let horizon = desired.len();
    let mut states = vec![initial.to_vec()];
    let mut events = Vec::new();
    let mut diverged = false;
    let mut termination = horizon;
    let mut safe = safe_set.contains(initial);
    if !safe {
        termination = 0;
    } else {
        for k in 0..horizon {
            let d = disturbance(k);
            if d.has_impulse() {
                events.push(DisturbanceEvent {
                    step: k,
                    impulse: d.impulse.clone(),
                });
            }
            let mut next = system.step(&states[k], &desired.0[k], &d)?;
            let finite = next.iter().all(|v| v.is_finite());
            if !finite {
                sanitize(&mut next);
                diverged = true;
            }
            let ok = finite && safe_set.contains(&next);
            states.push(next);
            if !ok {
                safe = false;
                termination = k + 1;
                break;
            }
        }
    }
    let outputs = states.iter().map(|s| system.output(s)).collect();
    Ok(Episode {
        id: 0,
        seed: 0,
        initial_state: initial.to_vec(),
        desired: desired.clone(),
        states,
        outputs,
        termination,
        safe,
        disturbances: events,
        diverged,
    })
}

/// Runs with explicit initial state and reference under the system's own
/// random disturbances drawn from `seed`.
pub fn rollout_with(
    system: &ClosedLoopSystem,
    safe_set: &SafeSet,
    initial: &[f64],
    desired: &DesiredTrajectory,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = simulate(system, safe_set, initial, desired, |_| system.sample_disturbance(&mut rng))?;
    ep.seed = seed;
    Ok(ep)
}

/// Samples a start and goal from `seed`, plans a straight-line reference of
/// `horizon` steps and rolls the system out. Equal seeds give equal episodes.
pub fn rollout_episode(
    system: &ClosedLoopSystem,
    safe_set: &SafeSet,
    horizon: usize,
    seed: u64,
) -> Result<Episode> {
    if horizon == 0 {
        return Err(Error::invalid("planning horizon must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (initial, goal) = system.sample_start(&mut rng);
    let desired = plan_trajectory(&system.output(&initial), &goal, horizon)?;
    let mut ep = simulate(system, safe_set, &initial, &desired, |_| system.sample_disturbance(&mut rng))?;
    ep.seed = seed;
    Ok(ep)
}

/// `count` episodes with seeds `base_seed + i`, ids `i`.
pub fn rollout_batch(
    system: &ClosedLoopSystem,
    horizon: usize,
    base_seed: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut ep = rollout_episode(system, system.safe_set(), horizon, base_seed.wrapping_add(i as u64))?;
            ep.id = i;
            Ok(ep)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub system: SystemConfig,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBatch {
    pub config: BatchConfig,
    pub episodes: Vec<Episode>,
}

impl EpisodeBatch {
    pub fn generate(system: &ClosedLoopSystem, horizon: usize, seed: u64, count: usize) -> Result<Self> {
        Ok(EpisodeBatch {
            config: BatchConfig {
                system: system.config.clone(),
                horizon,
                dt: system.config.dt,
                seed,
                episodes: count,
            },
            episodes: rollout_batch(system, horizon, seed, count)?,
        })
    }

    pub fn safe_count(&self) -> usize {
        self.episodes.iter().filter(|e| e.safe).count()
    }
}

pub fn save_batch(batch: &EpisodeBatch, path: &Path) -> Result<()> {
    json::write_exact(path, batch)
}

pub fn load_batch(path: &Path) -> Result<EpisodeBatch> {
    let batch: EpisodeBatch = json::read(path)?;
    if batch.episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(batch)
}
