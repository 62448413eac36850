//! Planar point mass under a saturated PD position controller.
//!
//! State `(px, py, vx, vy)`, output `(px, py)`. The safe set is the unit box
//! on position.

use super::{DisturbanceModel, GapConfig, Plant, SafeSet, SamplerConfig, SystemConfig, SystemKind, Variant, DEFAULT_DT};

const NOMINAL_MASS: f64 = 1.0;
const KP: f64 = 40.0;
const KD: f64 = 6.0;
const FORCE_LIMIT: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct PointMass {
    mass: f64,
    friction: f64,
}

impl PointMass {
    pub fn new(mass_factor: f64, friction: f64) -> Self {
        PointMass {
            mass: NOMINAL_MASS * mass_factor,
            friction,
        }
    }
}

impl Plant for PointMass {
    fn state_dim(&self) -> usize {
        4
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn impulse_indices(&self) -> &[usize] {
        &[2, 3]
    }

    fn output(&self, state: &[f64]) -> Vec<f64> {
        state[..2].to_vec()
    }

    fn step(&self, state: &[f64], measured: &[f64], desired: &[f64], dt: f64) -> Vec<f64> {
        let mut next = vec![0.0; 4];
        for axis in 0..2 {
            let force = (KP * (desired[axis] - measured[axis]) - KD * measured[axis + 2])
                .clamp(-FORCE_LIMIT, FORCE_LIMIT);
            let v = state[axis + 2];
            let accel = (force - self.friction * v) / self.mass;
            let v_next = v + accel * dt;
            next[axis + 2] = v_next;
            next[axis] = state[axis] + v_next * dt;
        }
        next
    }
}

pub fn default_config(variant: Variant) -> SystemConfig {
    SystemConfig {
        kind: SystemKind::PointMass,
        variant,
        dt: DEFAULT_DT,
        gap: GapConfig::default(),
        disturbance: DisturbanceModel {
            probability: 0.03,
            magnitude: 1.0,
        },
        sampler: SamplerConfig {
            state_low: vec![-0.8, -0.8, -4.0, -4.0],
            state_high: vec![0.8, 0.8, 4.0, 4.0],
            goal_low: vec![-0.9, -0.9],
            goal_high: vec![0.9, 0.9],
        },
        initial_offset: None,
        safe_set: SafeSet {
            indices: vec![0, 1],
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
        },
    }
}

#[cfg(test)]
mod tests {
    use crate::dynamics::{make_system, Variant};

    #[test]
    fn rest_at_reference_is_fixed_point() {
        let sys = make_system("point-mass", Variant::Nominal).unwrap();
        let s = vec![0.3, -0.2, 0.0, 0.0];
        let next = sys.step(&s, &[0.3, -0.2], &sys.zero_disturbance()).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn tracking_error_contracts() {
        let sys = make_system("point-mass", Variant::Nominal).unwrap();
        let goal = [0.2, 0.1];
        let mut s = vec![-0.4, 0.5, 0.0, 0.0];
        let err = |s: &[f64]| ((s[0] - goal[0]).powi(2) + (s[1] - goal[1]).powi(2)).sqrt();
        let e0 = err(&s);
        for _ in 0..50 {
            s = sys.step(&s, &goal, &sys.zero_disturbance()).unwrap();
        }
        assert!(err(&s) < e0, "{} !< {}", err(&s), e0);
    }
}
