//! Prediction-accuracy evaluation and closed-loop runs with a safety trigger.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SafetyAssessmentInput;
use crate::dynamics::{plan_trajectory, rollout_episode, ClosedLoopSystem, DesiredTrajectory, Episode};
use crate::embedding::MappingNetwork;
use crate::error::{Error, Result};
use crate::grid::{Assessment, GridModel};

/// A model ready to answer queries.
#[derive(Debug, Clone, Copy)]
pub struct Assessor<'a> {
    pub net: &'a MappingNetwork,
    pub grid: &'a GridModel,
    pub horizon: usize,
}

impl Assessor<'_> {
    pub fn assess(&self, x: &SafetyAssessmentInput) -> Result<Assessment> {
        self.grid.assess(self.net, x)
    }

    /// Assessment of `state` at step `k` of `desired`. States that are no
    /// longer finite are treated as certainly unsafe.
    pub fn assess_at(&self, state: &[f64], desired: &DesiredTrajectory, k: usize) -> Result<f64> {
        let x = SafetyAssessmentInput::at(state, desired, k, self.horizon);
        if !x.is_finite() || state.iter().any(|v| v.abs() == f64::MAX) {
            return Ok(0.0);
        }
        Ok(self.assess(&x)?.gamma)
    }

    /// Planning-phase assessment: the initial state and the start of the plan.
    pub fn assess_plan(&self, ep: &Episode) -> Result<f64> {
        self.assess_at(&ep.initial_state, &ep.desired, 0)
    }

    /// Assessment at every step the episode reached, `0..=T'` (or `0..T` for
    /// a safe episode).
    pub fn trace(&self, ep: &Episode) -> Result<Vec<f64>> {
        let last = if ep.safe { ep.horizon() - 1 } else { ep.termination };
        (0..=last).map(|k| self.assess_at(&ep.states[k], &ep.desired, k)).collect()
    }
}

/// First step of `trace` below `threshold`.
pub fn first_trigger(trace: &[f64], threshold: f64) -> Option<usize> {
    trace.iter().position(|&g| g < threshold)
}

pub fn brier(predictions: &[f64], outcomes: &[bool]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .zip(outcomes)
        .map(|(p, &safe)| {
            let o = if safe { 1.0 } else { 0.0 };
            (p - o) * (p - o)
        })
        .sum::<f64>()
        / predictions.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub safe_predicted_safe: usize,
    pub safe_predicted_unsafe: usize,
    pub unsafe_predicted_unsafe: usize,
    pub unsafe_predicted_safe: usize,
}

impl Confusion {
    pub fn from_predictions(gammas: &[f64], outcomes: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&g, &safe) in gammas.iter().zip(outcomes) {
            match (safe, g >= threshold) {
                (true, true) => c.safe_predicted_safe += 1,
                (true, false) => c.safe_predicted_unsafe += 1,
                (false, false) => c.unsafe_predicted_unsafe += 1,
                (false, true) => c.unsafe_predicted_safe += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.safe_predicted_safe + self.safe_predicted_unsafe + self.unsafe_predicted_unsafe + self.unsafe_predicted_safe
    }

    /// Fraction of safe episodes predicted safe; `None` without safe episodes.
    pub fn safe_accuracy(&self) -> Option<f64> {
        let n = self.safe_predicted_safe + self.safe_predicted_unsafe;
        (n > 0).then(|| self.safe_predicted_safe as f64 / n as f64)
    }

    pub fn unsafe_accuracy(&self) -> Option<f64> {
        let n = self.unsafe_predicted_unsafe + self.unsafe_predicted_safe;
        (n > 0).then(|| self.unsafe_predicted_unsafe as f64 / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTimes {
    /// Unsafe episodes whose trace dropped below the threshold before the
    /// violation.
    pub warned: usize,
    pub unsafe_episodes: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
}

impl LeadTimes {
    pub fn from_leads(leads: &[Option<usize>]) -> Self {
        let mut found: Vec<usize> = leads.iter().flatten().copied().collect();
        found.sort_unstable();
        let n = found.len();
        let median = (n > 0).then(|| {
            if n % 2 == 1 {
                found[n / 2] as f64
            } else {
                (found[n / 2 - 1] + found[n / 2]) as f64 / 2.0
            }
        });
        LeadTimes {
            warned: n,
            unsafe_episodes: leads.len(),
            median,
            mean: (n > 0).then(|| found.iter().sum::<usize>() as f64 / n as f64),
            min: found.first().copied(),
            max: found.last().copied(),
        }
    }
}

/// Steps between the first trigger and the violation of an unsafe episode.
pub fn lead_time(trace: &[f64], termination: usize, threshold: f64) -> Option<usize> {
    first_trigger(trace, threshold).filter(|&k| k < termination).map(|k| termination - k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub variant: String,
    pub episodes: usize,
    pub seed: u64,
    pub threshold: f64,
    pub confusion: Confusion,
    pub safe_accuracy: Option<f64>,
    pub unsafe_accuracy: Option<f64>,
    pub brier: f64,
    pub lead_times: LeadTimes,
    /// Embedding, network and grid settings the model was built with.
    pub model_settings: serde_json::Value,
}

/// Fresh episodes with seeds `seed + i`, classified by their planning-phase
/// assessment. Lead times come from the receding-horizon trace of the same
/// rollouts, without any intervention.
pub fn evaluate(
    assessor: &Assessor<'_>,
    system: &ClosedLoopSystem,
    horizon: usize,
    episodes: usize,
    seed: u64,
    threshold: f64,
) -> Result<(EvalReport, Vec<f64>, Vec<bool>)> {
    let rows: Vec<(f64, bool, Option<Option<usize>>)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ep = rollout_episode(system, system.safe_set(), horizon, seed.wrapping_add(i as u64))?;
            let g = assessor.assess_plan(&ep)?;
            let lead = if ep.safe {
                None
            } else {
                Some(lead_time(&assessor.trace(&ep)?, ep.termination, threshold))
            };
            Ok((g, ep.safe, lead))
        })
        .collect::<Result<_>>()?;
    let gammas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let outcomes: Vec<bool> = rows.iter().map(|r| r.1).collect();
    let leads: Vec<Option<usize>> = rows.iter().filter_map(|r| r.2).collect();
    let confusion = Confusion::from_predictions(&gammas, &outcomes, threshold);
    let report = EvalReport {
        system: system.name().to_string(),
        variant: format!("{:?}", system.variant()).to_lowercase(),
        episodes,
        seed,
        threshold,
        safe_accuracy: confusion.safe_accuracy(),
        unsafe_accuracy: confusion.unsafe_accuracy(),
        confusion,
        brier: brier(&gammas, &outcomes),
        lead_times: LeadTimes::from_leads(&leads),
        model_settings: serde_json::Value::Null,
    };
    Ok((report, gammas, outcomes))
}

/// Mean Brier score of planning-phase assessments over fixed probe episodes.
pub fn probe_brier(assessor: &Assessor<'_>, probes: &[Episode]) -> Result<f64> {
    let gammas = probes.iter().map(|ep| assessor.assess_plan(ep)).collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<bool> = probes.iter().map(|e| e.safe).collect();
    Ok(brier(&gammas, &outcomes))
}

/// One closed-loop episode with receding-horizon assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub seed: u64,
    pub gammas: Vec<f64>,
    pub trigger: Option<usize>,
    pub safe: bool,
    pub termination: usize,
}

/// Rolls out like [`rollout_episode`] with the same seed, assessing before
/// every step. At the first assessment below `threshold` the reference is
/// replaced by holding the current output for the rest of the episode. The
/// random stream is unaffected by the trigger, so untriggered runs
/// reproduce the plain rollout exactly.
pub fn run_episode(
    assessor: &Assessor<'_>,
    system: &ClosedLoopSystem,
    horizon: usize,
    seed: u64,
    threshold: f64,
) -> Result<RunTrace> {
    if horizon == 0 {
        return Err(Error::invalid("planning horizon must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (initial, goal) = system.sample_start(&mut rng);
    let mut desired = plan_trajectory(&system.output(&initial), &goal, horizon)?;
    let safe_set = system.safe_set();
    let mut state = initial;
    let mut gammas = Vec::new();
    let mut trigger = None;
    if !safe_set.contains(&state) {
        return Ok(RunTrace {
            seed,
            gammas,
            trigger,
            safe: false,
            termination: 0,
        });
    }
    for k in 0..horizon {
        let g = assessor.assess_at(&state, &desired, k)?;
        gammas.push(g);
        if trigger.is_none() && g < threshold {
            trigger = Some(k);
            let hold = system.output(&state);
            for p in desired.0[k..].iter_mut() {
                p.clone_from(&hold);
            }
        }
        let d = system.sample_disturbance(&mut rng);
        state = system.step(&state, &desired.0[k], &d)?;
        if !state.iter().all(|v| v.is_finite()) || !safe_set.contains(&state) {
            return Ok(RunTrace {
                seed,
                gammas,
                trigger,
                safe: false,
                termination: k + 1,
            });
        }
    }
    Ok(RunTrace {
        seed,
        gammas,
        trigger,
        safe: true,
        termination: horizon,
    })
}
