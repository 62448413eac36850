use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::DistanceMatrix;

const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 64;
const MIN_GAIN: f64 = 0.01;
/// Floor on joint probabilities inside the KL divergence.
const P_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub n_y: usize,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    /// KL is evaluated this often after exaggeration; the best checkpoint is
    /// returned.
    pub kl_interval: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            n_y: 2,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            kl_interval: 25,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_y == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if !(self.perplexity >= 5.0) {
            return Err(Error::invalid("perplexity must be at least 5"));
        }
        if (n as f64) < 3.0 * self.perplexity {
            return Err(Error::InsufficientData(format!(
                "{n} training data cannot support perplexity {} (need at least {})",
                self.perplexity,
                (3.0 * self.perplexity).ceil()
            )));
        }
        if self.iterations == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("t-SNE needs iterations and a positive learning rate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedSet {
    pub n_y: usize,
    /// Row-major `n x n_y`.
    pub coords: Vec<f64>,
    pub kl: f64,
    pub kl_at_exaggeration_end: f64,
}

impl EmbeddedSet {
    pub fn len(&self) -> usize {
        self.coords.len() / self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.n_y..(i + 1) * self.n_y]
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.coords.chunks(self.n_y).map(<[f64]>::to_vec).collect()
    }

    /// Per-axis `(min, max)`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.n_y)
            .map(|d| {
                self.coords
                    .iter()
                    .skip(d)
                    .step_by(self.n_y)
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
            })
            .collect()
    }

    pub fn bounding_diagonal(&self) -> f64 {
        self.bounds().iter().map(|(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt()
    }
}

/// Conditional distribution of one row at precision `beta`; returns the
/// entropy (nats).
fn row_distribution(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let p = (-beta * dj).exp();
        *o = p;
        sum += p;
        weighted += dj * p;
    }
    if sum <= 0.0 {
        // every neighbour underflowed; fall back to the nearest ones
        let nearest = d
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(f64::INFINITY, |m, (_, &v)| m.min(v));
        let mut count = 0.0;
        for (j, o) in out.iter_mut().enumerate() {
            *o = if j != i && d[j] == nearest { 1.0 } else { 0.0 };
            count += *o;
        }
        for o in out.iter_mut() {
            *o /= count;
        }
        return (count as f64).ln();
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Symmetrised joint probabilities `P` (row-major `n x n`, summing to one)
/// and the perplexity reached in each row.
///
/// Row `i` uses a Gaussian kernel on the squared distances of row `i`, with
/// the precision found by bisection on the entropy.
pub fn joint_probabilities(dist: &DistanceMatrix, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = dist.len();
    if n < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let achieved: Vec<f64> = cond
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, out)| {
            let row = dist.row(i);
            let nearest = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .fold(f64::INFINITY, |m, (_, &v)| m.min(v * v));
            // shifting by the nearest squared distance leaves P unchanged
            let d: Vec<f64> = row.iter().map(|&v| v * v - nearest).collect();
            let mean = d.iter().sum::<f64>() / (n - 1) as f64;
            let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut entropy = row_distribution(&d, i, beta, out);
            for _ in 0..MAX_BISECTIONS {
                let diff = entropy - target;
                if diff.abs() < PERPLEXITY_TOL {
                    break;
                }
                if diff > 0.0 {
                    lo = beta;
                    beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = 0.5 * (beta + lo);
                }
                entropy = row_distribution(&d, i, beta, out);
            }
            entropy.exp()
        })
        .collect();

    let mut p = vec![0.0; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / norm;
        }
    }
    Ok((p, achieved))
}

struct GradientPass {
    grad: Vec<f64>,
    z: f64,
}

/// Gradient of KL(P || Q) with P scaled by `exaggeration`, in one sweep over
/// pairs: `dC/dy_i = 4 (A_i - B_i / Z)` with
/// `A_i = sum_j e p_ij w_ij (y_i - y_j)`, `B_i = sum_j w_ij^2 (y_i - y_j)`.
fn gradient(p: &[f64], y: &[f64], n: usize, dim: usize, exaggeration: f64) -> GradientPass {
    match dim {
        1 => gradient_fixed::<1>(p, y, n, exaggeration),
        2 => gradient_fixed::<2>(p, y, n, exaggeration),
        3 => gradient_fixed::<3>(p, y, n, exaggeration),
        _ => gradient_dyn(p, y, n, dim, exaggeration),
    }
}

fn gradient_fixed<const D: usize>(p: &[f64], y: &[f64], n: usize, exaggeration: f64) -> GradientPass {
    let pts: &[[f64; D]] = &y.chunks_exact(D).map(|c| c.try_into().expect("D values")).collect::<Vec<_>>();
    let rows: Vec<([f64; D], [f64; D], f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = pts[i];
            let prow = &p[i * n..(i + 1) * n];
            let mut attract = [0.0; D];
            let mut repulse = [0.0; D];
            let mut z = 0.0;
            for (j, yj) in pts.iter().enumerate() {
                if j == i {
                    continue;
                }
                let mut t = [0.0; D];
                let mut d2 = 0.0;
                for k in 0..D {
                    t[k] = yi[k] - yj[k];
                    d2 += t[k] * t[k];
                }
                let w = 1.0 / (1.0 + d2);
                z += w;
                let a = exaggeration * prow[j] * w;
                let b = w * w;
                for k in 0..D {
                    attract[k] += a * t[k];
                    repulse[k] += b * t[k];
                }
            }
            (attract, repulse, z)
        })
        .collect();
    let z: f64 = rows.iter().map(|r| r.2).sum();
    let mut grad = vec![0.0; n * D];
    for (i, (a, b, _)) in rows.iter().enumerate() {
        for k in 0..D {
            grad[i * D + k] = 4.0 * (a[k] - b[k] / z);
        }
    }
    GradientPass { grad, z }
}

fn gradient_dyn(p: &[f64], y: &[f64], n: usize, dim: usize, exaggeration: f64) -> GradientPass {
    let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * dim..(i + 1) * dim];
            let prow = &p[i * n..(i + 1) * n];
            let mut attract = vec![0.0; dim];
            let mut repulse = vec![0.0; dim];
            let mut z = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let yj = &y[j * dim..(j + 1) * dim];
                let mut d2 = 0.0;
                for k in 0..dim {
                    let t = yi[k] - yj[k];
                    d2 += t * t;
                }
                let w = 1.0 / (1.0 + d2);
                z += w;
                let a = exaggeration * prow[j] * w;
                let b = w * w;
                for k in 0..dim {
                    let t = yi[k] - yj[k];
                    attract[k] += a * t;
                    repulse[k] += b * t;
                }
            }
            (attract, repulse, z)
        })
        .collect();
    let z: f64 = rows.iter().map(|r| r.2).sum();
    let mut grad = vec![0.0; n * dim];
    for (i, (a, b, _)) in rows.iter().enumerate() {
        for k in 0..dim {
            grad[i * dim + k] = 4.0 * (a[k] - b[k] / z);
        }
    }
    GradientPass { grad, z }
}

/// KL(P || Q) for the embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[f64], n: usize, dim: usize) -> f64 {
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * dim..(i + 1) * dim];
            let mut z = 0.0;
            let mut cross = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let yj = &y[j * dim..(j + 1) * dim];
                let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
                let w = 1.0 / (1.0 + d2);
                z += w;
                let pij = p[i * n + j];
                if pij > 0.0 {
                    cross += pij * (pij.max(P_FLOOR).ln() - w.ln());
                }
            }
            (z, cross)
        })
        .collect();
    let z: f64 = rows.iter().map(|r| r.0).sum();
    let p_sum: f64 = p.iter().sum();
    // sum p ln(p / (w / z)) = sum p (ln p - ln w) + ln z * sum p
    let kl = rows.iter().map(|r| r.1).sum::<f64>() + z.ln() * p_sum;
    kl.max(0.0)
}

/// Exact t-SNE over a precomputed distance matrix.
pub fn tsne_embed(dist: &DistanceMatrix, cfg: &EmbeddingConfig) -> Result<EmbeddedSet> {
    let n = dist.len();
    cfg.validate(n)?;
    let dim = cfg.n_y;
    let (p, _) = joint_probabilities(dist, cfg.perplexity)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..n * dim).map(|_| normal.sample(&mut rng)).collect();
    let mut update = vec![0.0; n * dim];
    let mut gains = vec![1.0f64; n * dim];

    let mut kl_exag_end = f64::NAN;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let exag_end = cfg.exaggeration_iterations.min(cfg.iterations);

    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let pass = gradient(&p, &y, n, dim, exaggeration);
        let max_grad = pass.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if !max_grad.is_finite() || !pass.z.is_finite() {
            return Err(Error::NonFiniteGradient {
                iteration: it,
                max_gradient: max_grad,
            });
        }
        for ((g, u), gain) in pass.grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                (*gain * 0.8).max(MIN_GAIN)
            };
            *u = momentum * *u - cfg.learning_rate * *gain * g;
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            *yi += u;
        }
        for k in 0..dim {
            let mean = y.iter().skip(k).step_by(dim).sum::<f64>() / n as f64;
            y.iter_mut().skip(k).step_by(dim).for_each(|v| *v -= mean);
        }

        let done = it + 1;
        let checkpoint = done == exag_end
            || done == cfg.iterations
            || (done > exag_end && (done - exag_end) % cfg.kl_interval.max(1) == 0);
        if checkpoint && done >= exag_end {
            let kl = kl_divergence(&p, &y, n, dim);
            if done == exag_end {
                kl_exag_end = kl;
            }
            if best.as_ref().is_none_or(|(b, _)| kl < *b) {
                best = Some((kl, y.clone()));
            }
        }
    }

    let (kl, coords) = best.unwrap_or_else(|| (kl_divergence(&p, &y, n, dim), y));
    if kl_exag_end.is_nan() {
        kl_exag_end = kl;
    }
    Ok(EmbeddedSet {
        n_y: dim,
        coords,
        kl,
        kl_at_exaggeration_end: kl_exag_end,
    })
}
