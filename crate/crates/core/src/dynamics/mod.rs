//! Closed-loop systems, the reference planner, safe sets and episode rollout.
//!
//! A [`ClosedLoopSystem`] bundles a [`Plant`] (physics plus its tracking
//! controller), a disturbance model and an initial-state sampler. Stepping is a
//! pure function of `(state, desired point, disturbance)`; all randomness is
//! drawn by the rollout from a per-episode seed.

pub mod cart_pole;
pub mod point_mass;
mod rollout;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rollout::{
    load_batch, rollout_batch, rollout_episode, rollout_with, save_batch, simulate, BatchConfig,
    DisturbanceEvent, Episode, EpisodeBatch,
};

/// Integration step shared by the built-in systems, in seconds.
pub const DEFAULT_DT: f64 = 0.02;

pub const AVAILABLE_SYSTEMS: &[&str] = &["point-mass", "cart-pole"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    PointMass,
    CartPole,
}

impl SystemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::PointMass => "point-mass",
            SystemKind::CartPole => "cart-pole",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-mass" => Ok(SystemKind::PointMass),
            "cart-pole" => Ok(SystemKind::CartPole),
            other => Err(Error::UnknownSystem {
                name: other.to_string(),
                available: AVAILABLE_SYSTEMS.join(", "),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Nominal,
    Real,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Variant::Nominal),
            "real" => Ok(Variant::Real),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected nominal or real)"
            ))),
        }
    }
}

/// Axis-aligned bounds on selected state entries. Bounds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSet {
    pub indices: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SafeSet {
    pub fn new(indices: Vec<usize>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if indices.len() != lower.len() || indices.len() != upper.len() {
            return Err(Error::invalid("safe set bounds must match monitored indices"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::invalid("safe set requires lower <= upper"));
        }
        Ok(SafeSet {
            indices,
            lower,
            upper,
        })
    }

    pub fn contains(&self, state: &[f64]) -> bool {
        self.indices
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&i, (&lo, &hi))| state.get(i).is_some_and(|&v| v >= lo && v <= hi))
    }
}

pub fn is_safe(state: &[f64], safe_set: &SafeSet) -> bool {
    safe_set.contains(state)
}

/// Reference trajectory `z*_0 .. z*_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesiredTrajectory(pub Vec<Vec<f64>>);

impl DesiredTrajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.0
    }

    /// Point `k`, holding the last point past the end.
    pub fn at(&self, k: usize) -> &[f64] {
        &self.0[k.min(self.0.len() - 1)]
    }
}

/// Straight-line interpolation with `steps` equally spaced points from
/// `start` to `goal`. A single-step plan is just `start`.
pub fn plan_trajectory(start: &[f64], goal: &[f64], steps: usize) -> Result<DesiredTrajectory> {
    if steps == 0 {
        return Err(Error::invalid("trajectory needs at least one step"));
    }
    if start.len() != goal.len() {
        return Err(Error::invalid("start and goal dimensions differ"));
    }
    if start.iter().chain(goal).any(|v| !v.is_finite()) {
        return Err(Error::invalid("start and goal must be finite"));
    }
    if steps == 1 {
        return Ok(DesiredTrajectory(vec![start.to_vec()]));
    }
    let last = (steps - 1) as f64;
    let points = (0..steps)
        .map(|k| {
            let t = k as f64 / last;
            start
                .iter()
                .zip(goal)
                .map(|(&a, &b)| if k == steps - 1 { b } else { a + t * (b - a) })
                .collect()
        })
        .collect();
    Ok(DesiredTrajectory(points))
}

/// Per-step disturbance: an impulse added to the plant's velocity entries and
/// additive noise on the state the controller measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub impulse: Vec<f64>,
    pub sensor: Vec<f64>,
}

impl Disturbance {
    pub fn zero(impulse_dim: usize, state_dim: usize) -> Self {
        Disturbance {
            impulse: vec![0.0; impulse_dim],
            sensor: vec![0.0; state_dim],
        }
    }

    pub fn has_impulse(&self) -> bool {
        self.impulse.iter().any(|&v| v != 0.0)
    }
}

/// With probability `probability` per step, an impulse uniform in
/// `[-magnitude, magnitude]` on every impulse channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceModel {
    pub probability: f64,
    pub magnitude: f64,
}

impl DisturbanceModel {
    pub const NONE: DisturbanceModel = DisturbanceModel {
        probability: 0.0,
        magnitude: 0.0,
    };
}

/// Parameter offsets of the real variant relative to the nominal one. Every
/// offset is multiplied by `scale`; `scale = 0` makes the variants identical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub scale: f64,
    /// Relative change of the moving masses.
    pub mass_delta: f64,
    /// Viscous friction coefficient on the actuated velocities.
    pub friction: f64,
    /// Standard deviation of the noise on the controller's state measurement.
    pub sensor_noise: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig {
            scale: 1.0,
            mass_delta: -0.2,
            friction: 0.5,
            sensor_noise: 0.01,
        }
    }
}

/// Box sampler for initial states and goals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub state_low: Vec<f64>,
    pub state_high: Vec<f64>,
    pub goal_low: Vec<f64>,
    pub goal_high: Vec<f64>,
}

impl SamplerConfig {
    fn validate(&self, n_s: usize, n_z: usize) -> Result<()> {
        if self.state_low.len() != n_s || self.state_high.len() != n_s {
            return Err(Error::invalid("sampler state bounds have wrong dimension"));
        }
        if self.goal_low.len() != n_z || self.goal_high.len() != n_z {
            return Err(Error::invalid("sampler goal bounds have wrong dimension"));
        }
        let ordered = self
            .state_low
            .iter()
            .zip(&self.state_high)
            .chain(self.goal_low.iter().zip(&self.goal_high))
            .all(|(l, h)| l <= h);
        if !ordered {
            return Err(Error::invalid("sampler requires low <= high"));
        }
        Ok(())
    }
}

fn uniform_box<R: Rng + ?Sized>(rng: &mut R, low: &[f64], high: &[f64]) -> Vec<f64> {
    low.iter()
        .zip(high)
        .map(|(&l, &h)| if l == h { l } else { rng.random_range(l..=h) })
        .collect()
}

/// Everything needed to rebuild a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub variant: Variant,
    pub dt: f64,
    pub gap: GapConfig,
    pub disturbance: DisturbanceModel,
    pub sampler: SamplerConfig,
    /// Extra uniform offset (half-widths per state entry) added to the initial
    /// state of the real variant. Off unless set.
    #[serde(default)]
    pub initial_offset: Option<Vec<f64>>,
    pub safe_set: SafeSet,
}

impl SystemConfig {
    pub fn new(name: &str, variant: Variant) -> Result<Self> {
        let kind: SystemKind = name.parse()?;
        Ok(match kind {
            SystemKind::PointMass => point_mass::default_config(variant),
            SystemKind::CartPole => cart_pole::default_config(variant),
        })
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        SystemConfig {
            variant,
            ..self.clone()
        }
    }

    /// Effective mass factor, friction and sensor noise for this variant.
    pub fn effective_gap(&self) -> (f64, f64, f64) {
        match self.variant {
            Variant::Nominal => (1.0, 0.0, 0.0),
            Variant::Real => {
                let s = self.gap.scale;
                (
                    1.0 + s * self.gap.mass_delta,
                    s * self.gap.friction,
                    s * self.gap.sensor_noise,
                )
            }
        }
    }
}

/// Physics plus tracking controller of one closed-loop system.
pub trait Plant: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// State entries that impulse disturbances add to.
    fn impulse_indices(&self) -> &[usize];
    fn output(&self, state: &[f64]) -> Vec<f64>;
    /// One closed-loop step. The controller acts on `measured`; the physics
    /// evolves `state`.
    fn step(&self, state: &[f64], measured: &[f64], desired: &[f64], dt: f64) -> Vec<f64>;
}

/// An immutable, shareable closed-loop system.
#[derive(Debug, Clone)]
pub struct ClosedLoopSystem {
    pub config: SystemConfig,
    plant: Arc<dyn Plant>,
    sensor_noise: f64,
}

impl ClosedLoopSystem {
    pub fn from_config(config: &SystemConfig) -> Result<Self> {
        let (mass_factor, friction, sensor_noise) = config.effective_gap();
        if !(mass_factor > 0.0) || friction < 0.0 || sensor_noise < 0.0 {
            return Err(Error::invalid("gap parameters give a non-physical system"));
        }
        let plant: Arc<dyn Plant> = match config.kind {
            SystemKind::PointMass => Arc::new(point_mass::PointMass::new(mass_factor, friction)),
            SystemKind::CartPole => Arc::new(cart_pole::CartPole::new(mass_factor, friction)),
        };
        Self::with_plant(config.clone(), plant, sensor_noise)
    }

    /// Wraps a custom plant.
    pub fn with_plant(config: SystemConfig, plant: Arc<dyn Plant>, sensor_noise: f64) -> Result<Self> {
        config.sampler.validate(plant.state_dim(), plant.output_dim())?;
        if !(config.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if let Some(off) = &config.initial_offset {
            if off.len() != plant.state_dim() {
                return Err(Error::invalid("initial offset has wrong dimension"));
            }
        }
        Ok(ClosedLoopSystem {
            config,
            plant,
            sensor_noise,
        })
    }

    pub fn name(&self) -> &'static str {
        self.config.kind.as_str()
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.plant.output_dim()
    }

    pub fn impulse_dim(&self) -> usize {
        self.plant.impulse_indices().len()
    }

    pub fn safe_set(&self) -> &SafeSet {
        &self.config.safe_set
    }

    pub fn output(&self, state: &[f64]) -> Vec<f64> {
        self.plant.output(state)
    }

    pub fn zero_disturbance(&self) -> Disturbance {
        Disturbance::zero(self.impulse_dim(), self.state_dim())
    }

    /// Next state under the closed loop. Deterministic.
    pub fn step(&self, state: &[f64], desired: &[f64], disturbance: &Disturbance) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::invalid(format!(
                "state has dimension {}, system expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        if desired.len() != self.output_dim() {
            return Err(Error::invalid(format!(
                "desired point has dimension {}, system expects {}",
                desired.len(),
                self.output_dim()
            )));
        }
        if disturbance.impulse.len() != self.impulse_dim() || disturbance.sensor.len() != self.state_dim() {
            return Err(Error::invalid("disturbance has wrong dimension"));
        }
        let measured: Vec<f64> = state.iter().zip(&disturbance.sensor).map(|(s, n)| s + n).collect();
        let mut next = self.plant.step(state, &measured, desired, self.config.dt);
        for (&i, &d) in self.plant.impulse_indices().iter().zip(&disturbance.impulse) {
            next[i] += d;
        }
        Ok(next)
    }

    /// Draws one step's disturbance. Nothing is drawn for channels that are
    /// switched off, so a zero-gap real system consumes the same random stream
    /// as the nominal one.
    pub fn sample_disturbance<R: Rng + ?Sized>(&self, rng: &mut R) -> Disturbance {
        let mut d = self.zero_disturbance();
        let model = self.config.disturbance;
        if model.probability > 0.0 && model.magnitude > 0.0 && rng.random::<f64>() < model.probability {
            for v in d.impulse.iter_mut() {
                *v = rng.random_range(-model.magnitude..=model.magnitude);
            }
        }
        if self.sensor_noise > 0.0 {
            let normal = Normal::new(0.0, self.sensor_noise).expect("positive std");
            for v in d.sensor.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        d
    }

    /// Samples an initial state and a goal output.
    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let s = &self.config.sampler;
        let mut state = uniform_box(rng, &s.state_low, &s.state_high);
        let goal = uniform_box(rng, &s.goal_low, &s.goal_high);
        if self.config.variant == Variant::Real {
            if let Some(off) = &self.config.initial_offset {
                for (v, &w) in state.iter_mut().zip(off) {
                    if w > 0.0 {
                        *v += rng.random_range(-w..=w);
                    }
                }
            }
        }
        (state, goal)
    }
}

pub fn make_system(name: &str, variant: Variant) -> Result<ClosedLoopSystem> {
    ClosedLoopSystem::from_config(&SystemConfig::new(name, variant)?)
}

/// Convenience wrapper matching the free-function form of a closed-loop step.
pub fn step_closed_loop(
    system: &ClosedLoopSystem,
    state: &[f64],
    desired: &[f64],
    disturbance: &Disturbance,
) -> Result<Vec<f64>> {
    system.step(state, desired, disturbance)
}
