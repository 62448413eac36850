//! Cart-pole under a saturated LQR tracking controller.
//!
//! State `(x, x_dot, theta, theta_dot)` with `theta = 0` upright, output the
//! cart position. Impulses kick the pole's angular velocity. The gains come
//! from a discrete Riccati iteration on the nominal model's linearisation and
//! are shared by every variant: the controller is designed on the nominal
//! model.

use std::sync::OnceLock;

use nalgebra::{Matrix1, Matrix4, Matrix4x1, RowVector4};

use super::{DisturbanceModel, GapConfig, Plant, SafeSet, SamplerConfig, SystemConfig, SystemKind, Variant, DEFAULT_DT};

const GRAVITY: f64 = 9.81;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const HALF_LENGTH: f64 = 0.5;
const FORCE_LIMIT: f64 = 15.0;

#[derive(Debug, Clone)]
pub struct CartPole {
    cart_mass: f64,
    pole_mass: f64,
    friction: f64,
    gains: RowVector4<f64>,
}

impl CartPole {
    pub fn new(mass_factor: f64, friction: f64) -> Self {
        CartPole {
            cart_mass: CART_MASS * mass_factor,
            pole_mass: POLE_MASS * mass_factor,
            friction,
            gains: *nominal_gains(),
        }
    }

    pub fn gains(&self) -> [f64; 4] {
        [self.gains[0], self.gains[1], self.gains[2], self.gains[3]]
    }

    fn integrate(&self, s: &[f64], force: f64, dt: f64) -> [f64; 4] {
        let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
        let total = self.cart_mass + self.pole_mass;
        let f = force - self.friction * x_dot;
        let (sin, cos) = theta.sin_cos();
        let temp = (f + self.pole_mass * HALF_LENGTH * theta_dot * theta_dot * sin) / total;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - self.pole_mass * cos * cos / total));
        let x_acc = temp - self.pole_mass * HALF_LENGTH * theta_acc * cos / total;
        let x_dot_next = x_dot + x_acc * dt;
        let theta_dot_next = theta_dot + theta_acc * dt;
        [
            x + x_dot_next * dt,
            x_dot_next,
            theta + theta_dot_next * dt,
            theta_dot_next,
        ]
    }
}

fn nominal_gains() -> &'static RowVector4<f64> {
    static GAINS: OnceLock<RowVector4<f64>> = OnceLock::new();
    GAINS.get_or_init(|| {
        let model = CartPole {
            cart_mass: CART_MASS,
            pole_mass: POLE_MASS,
            friction: 0.0,
            gains: RowVector4::zeros(),
        };
        lqr_gains(&model, DEFAULT_DT)
    })
}

/// Discrete LQR on a central-difference linearisation about the upright rest.
fn lqr_gains(model: &CartPole, dt: f64) -> RowVector4<f64> {
    let h = 1e-6;
    let origin = [0.0; 4];
    let mut a = Matrix4::zeros();
    for j in 0..4 {
        let mut plus = origin;
        let mut minus = origin;
        plus[j] += h;
        minus[j] -= h;
        let fp = model.integrate(&plus, 0.0, dt);
        let fm = model.integrate(&minus, 0.0, dt);
        for i in 0..4 {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let fp = model.integrate(&origin, h, dt);
    let fm = model.integrate(&origin, -h, dt);
    let b = Matrix4x1::from_iterator((0..4).map(|i| (fp[i] - fm[i]) / (2.0 * h)));

    let q = Matrix4::from_diagonal(&nalgebra::Vector4::new(5.0, 1.0, 50.0, 1.0));
    let r = Matrix1::new(0.05);
    let mut p = q;
    for _ in 0..20_000 {
        let btp = b.transpose() * p;
        let gain = (r + btp * b).try_inverse().expect("scalar inverse") * btp * a;
        let next = q + a.transpose() * p * (a - b * gain);
        let delta = (next - p).abs().max();
        p = next;
        if delta < 1e-12 {
            break;
        }
    }
    let btp = b.transpose() * p;
    (r + btp * b).try_inverse().expect("scalar inverse") * btp * a
}

impl Plant for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn impulse_indices(&self) -> &[usize] {
        &[3]
    }

    fn output(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0]]
    }

    fn step(&self, state: &[f64], measured: &[f64], desired: &[f64], dt: f64) -> Vec<f64> {
        let err = RowVector4::new(measured[0] - desired[0], measured[1], measured[2], measured[3]);
        let force = (-self.gains.dot(&err)).clamp(-FORCE_LIMIT, FORCE_LIMIT);
        self.integrate(state, force, dt).to_vec()
    }
}

pub fn default_config(variant: Variant) -> SystemConfig {
    SystemConfig {
        kind: SystemKind::CartPole,
        variant,
        dt: DEFAULT_DT,
        gap: GapConfig::default(),
        disturbance: DisturbanceModel {
            probability: 0.02,
            magnitude: 1.0,
        },
        sampler: SamplerConfig {
            state_low: vec![-0.5, -1.0, -0.2, -2.5],
            state_high: vec![0.5, 1.0, 0.2, 2.5],
            goal_low: vec![-2.0],
            goal_high: vec![2.0],
        },
        initial_offset: None,
        safe_set: SafeSet {
            indices: vec![0, 2],
            lower: vec![-2.4, -0.25],
            upper: vec![2.4, 0.25],
        },
    }
}
