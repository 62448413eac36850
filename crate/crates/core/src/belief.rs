//! Basic belief assignments over the outcomes {safe, unsafe} and the fusion
//! rules used to build cell estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to member uncertainties before [`fuse_f`]. Two zero
/// uncertainties would otherwise make the rule 0/0.
pub const UNCERTAINTY_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bba {
    pub b_safe: f64,
    pub b_unsafe: f64,
    pub mu: f64,
}

/// No estimate: all mass on uncertainty.
pub const EMPTY: Bba = Bba {
    b_safe: 0.0,
    b_unsafe: 0.0,
    mu: 1.0,
};

impl Bba {
    pub fn new(b_safe: f64, b_unsafe: f64, mu: f64) -> Result<Self> {
        let b = Bba { b_safe, b_unsafe, mu };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.b_safe, self.b_unsafe, self.mu];
        if parts.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("belief masses out of [0, 1]: {self:?}")));
        }
        if (self.sum() - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("belief masses do not sum to one: {self:?}")));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.b_safe + self.b_unsafe + self.mu
    }

    pub fn is_empty(&self) -> bool {
        self.mu >= 1.0
    }

    /// Largest component-wise absolute difference.
    pub fn max_diff(&self, other: &Bba) -> f64 {
        (self.b_safe - other.b_safe)
            .abs()
            .max((self.b_unsafe - other.b_unsafe).abs())
            .max((self.mu - other.mu).abs())
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")))
    }
}

/// Belief from a nominal datum with unsafety score `lambda` and uncertainty `mu`.
pub fn bba_from_training(lambda: f64, mu: f64) -> Result<Bba> {
    unit("lambda", lambda)?;
    unit("mu", mu)?;
    Ok(Bba {
        b_safe: (1.0 - mu) * (1.0 - lambda),
        b_unsafe: (1.0 - mu) * lambda,
        mu,
    })
}

/// Belief from a real-system observation; carries no uncertainty.
pub fn bba_from_feedback(lambda: f64) -> Result<Bba> {
    unit("lambda", lambda)?;
    Ok(Bba {
        b_safe: 1.0 - lambda,
        b_unsafe: lambda,
        mu: 0.0,
    })
}

/// Fusion of independent assignments.
///
/// The rule is usually written with products of all other members'
/// uncertainties in numerator and denominator. Dividing both through by the
/// product of every uncertainty gives an equivalent weighted mean with
/// weights `(1 - mu_i) / mu_i`, which does not underflow for large sets.
/// Members with `mu = 1` get zero weight, so the empty assignment is neutral.
pub fn fuse_f(bbas: &[Bba]) -> Bba {
    // fixed summation order makes the result independent of input order
    let mut sorted = bbas.to_vec();
    sorted.sort_by(|a, b| {
        a.mu.total_cmp(&b.mu)
            .then(a.b_safe.total_cmp(&b.b_safe))
            .then(a.b_unsafe.total_cmp(&b.b_unsafe))
    });
    let mut weight_sum = 0.0;
    let mut safe = 0.0;
    let mut unsafe_ = 0.0;
    let mut one_minus = 0.0;
    for b in &sorted {
        let mu = b.mu.max(UNCERTAINTY_FLOOR);
        if mu >= 1.0 {
            continue;
        }
        let w = (1.0 - mu) / mu;
        weight_sum += w;
        safe += w * b.b_safe;
        unsafe_ += w * b.b_unsafe;
        one_minus += 1.0 - mu;
    }
    if weight_sum <= 0.0 {
        return EMPTY;
    }
    let b_safe = safe / weight_sum;
    let b_unsafe = unsafe_ / weight_sum;
    let mu = (one_minus / weight_sum).clamp(0.0, 1.0);
    // members built with a floored mu carry slightly more than 1 - mu of mass;
    // renormalise so the output closes exactly
    let total = b_safe + b_unsafe + mu;
    Bba {
        b_safe: b_safe / total,
        b_unsafe: b_unsafe / total,
        mu: mu / total,
    }
}

/// Uncertainty of a feedback estimate after `count` observations.
pub fn feedback_uncertainty(count: usize, alpha: f64, beta: f64) -> f64 {
    beta * (-alpha * (count.max(1) - 1) as f64).exp()
}

/// Averages zero-uncertainty feedback beliefs and assigns a decaying
/// uncertainty driven by `count`. Returns the empty assignment when there
/// are no members.
pub fn fuse_g(members: &[Bba], count: usize, alpha: f64, beta: f64) -> Bba {
    if members.is_empty() {
        return EMPTY;
    }
    let mu = feedback_uncertainty(count, alpha, beta);
    let n = members.len() as f64;
    let safe = members.iter().map(|b| b.b_safe).sum::<f64>() / n;
    let unsafe_ = members.iter().map(|b| b.b_unsafe).sum::<f64>() / n;
    let total = safe + unsafe_;
    let (safe, unsafe_) = if total > 0.0 {
        (safe / total, unsafe_ / total)
    } else {
        (0.5, 0.5)
    };
    Bba {
        b_safe: (1.0 - mu) * safe,
        b_unsafe: (1.0 - mu) * unsafe_,
        mu,
    }
}

/// Cell estimate from its prior and feedback parts.
pub fn combine(prior: &Bba, feedback: &Bba) -> Bba {
    if feedback.is_empty() {
        *prior
    } else {
        fuse_f(&[*prior, *feedback])
    }
}
