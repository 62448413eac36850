//! Exact Gaussian-process regression over the embedding space with a
//! squared-exponential kernel and zero prior mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyper {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !ok(self.length_scale) || !ok(self.signal_variance) || !(self.noise_variance >= 0.0) {
            return Err(Error::invalid(format!("invalid kernel hyperparameters {self:?}")));
        }
        Ok(())
    }

    fn kernel(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        let d0 = a[0] - b[0];
        let d1 = a[1] - b[1];
        self.signal_variance * (-(d0 * d0 + d1 * d1) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Posterior mean and standard deviation at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

/// Fitted regression. Only the data and hyperparameters are serialised; the
/// factorisation is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscrepancyGp {
    pub hyper: GpHyper,
    pub inputs: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    /// Diagonal jitter that made the kernel matrix factorisable.
    pub jitter: f64,
    #[serde(skip)]
    chol: Vec<Vec<f64>>,
    #[serde(skip)]
    weights: Vec<f64>,
}

impl PartialEq for DiscrepancyGp {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.inputs == other.inputs && self.targets == other.targets && self.jitter == other.jitter
    }
}

/// Largest jitter tried before a factorisation failure is reported.
pub const MAX_JITTER: f64 = 1e-6;

impl DiscrepancyGp {
    /// A regression with no data; predicts the prior everywhere.
    pub fn empty(hyper: GpHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(DiscrepancyGp {
            hyper,
            inputs: Vec::new(),
            targets: Vec::new(),
            jitter: 0.0,
            chol: Vec::new(),
            weights: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn diag(&self) -> f64 {
        self.hyper.signal_variance + self.hyper.noise_variance + self.jitter
    }

    /// Appends Cholesky rows for inputs `from..`. Rows are computed in order
    /// from earlier rows only, so appending matches a full factorisation.
    fn extend_factor(&mut self, from: usize) -> bool {
        self.chol.truncate(from);
        let diag = self.diag();
        for i in from..self.inputs.len() {
            let mut row = Vec::with_capacity(i + 1);
            for j in 0..i {
                let k = self.hyper.kernel(&self.inputs[i], &self.inputs[j]);
                let lj = &self.chol[j];
                let s: f64 = row.iter().zip(lj.iter()).map(|(a, b)| a * b).sum();
                row.push((k - s) / lj[j]);
            }
            let s: f64 = row.iter().map(|a| a * a).sum();
            let d = diag - s;
            if !(d > 0.0) || !d.is_finite() {
                return false;
            }
            row.push(d.sqrt());
            self.chol.push(row);
        }
        true
    }

    fn refactor(&mut self, from: usize) -> Result<()> {
        if !self.extend_factor(from) {
            // escalate jitter and start over
            let mut jitter = 1e-10;
            loop {
                self.jitter = jitter;
                if self.extend_factor(0) {
                    break;
                }
                if jitter >= MAX_JITTER {
                    return Err(Error::Numerical(format!(
                        "kernel matrix not positive definite with jitter {MAX_JITTER:e}"
                    )));
                }
                jitter = (jitter * 10.0).min(MAX_JITTER);
            }
        }
        self.weights = self.solve(&self.targets);
        Ok(())
    }

    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(b.len());
        for (i, row) in self.chol.iter().enumerate() {
            let s: f64 = row[..i].iter().zip(&z).map(|(a, b)| a * b).sum();
            z.push((b[i] - s) / row[i]);
        }
        z
    }

    /// `K^-1 b` via the factorisation.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = self.forward(b);
        for i in (0..x.len()).rev() {
            let row = &self.chol[i];
            x[i] /= row[i];
            let xi = x[i];
            for (xk, l) in x[..i].iter_mut().zip(&row[..i]) {
                *xk -= l * xi;
            }
        }
        x
    }

    /// Fits on the given pairs.
    pub fn fit(inputs: &[[f64; 2]], targets: &[f64], hyper: GpHyper) -> Result<Self> {
        let mut gp = DiscrepancyGp::empty(hyper)?;
        gp.extend(inputs, targets, usize::MAX)?;
        Ok(gp)
    }

    /// Adds pairs and refits. When the total exceeds `cap`, the oldest pairs
    /// are dropped. Returns the number dropped.
    pub fn extend(&mut self, inputs: &[[f64; 2]], targets: &[f64], cap: usize) -> Result<usize> {
        if inputs.len() != targets.len() {
            return Err(Error::invalid("one target per input required"));
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::invalid("discrepancy targets must lie in [0, 1]"));
        }
        if inputs.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::invalid("non-finite regression input"));
        }
        let old = self.inputs.len();
        self.inputs.extend_from_slice(inputs);
        self.targets.extend_from_slice(targets);
        let mut dropped = 0;
        let from = if self.inputs.len() > cap {
            dropped = self.inputs.len() - cap;
            self.inputs.drain(..dropped);
            self.targets.drain(..dropped);
            0
        } else if self.chol.len() == old {
            old
        } else {
            0
        };
        self.refactor(from)?;
        Ok(dropped)
    }

    /// Rebuilds the factorisation after deserialisation.
    pub fn restore(&mut self) -> Result<()> {
        self.hyper.validate()?;
        if self.inputs.len() != self.targets.len() {
            return Err(Error::invalid("regression data is ragged"));
        }
        let jitter = self.jitter;
        if !self.extend_factor(0) {
            return Err(Error::Numerical(format!("stored regression does not factorise with jitter {jitter:e}")));
        }
        self.weights = self.solve(&self.targets);
        Ok(())
    }

    fn cross(&self, q: &[f64; 2]) -> Vec<f64> {
        self.inputs.iter().map(|x| self.hyper.kernel(q, x)).collect()
    }

    /// Unclamped posterior mean.
    pub fn raw_mean(&self, q: &[f64; 2]) -> f64 {
        self.inputs
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| self.hyper.kernel(q, x) * w)
            .sum()
    }

    pub fn variance(&self, q: &[f64; 2]) -> f64 {
        let v = self.forward(&self.cross(q));
        (self.hyper.signal_variance - v.iter().map(|a| a * a).sum::<f64>()).max(0.0)
    }

    /// Posterior at `q`; the mean is clamped to `[0, 1]`.
    pub fn predict(&self, q: &[f64; 2]) -> Prediction {
        Prediction {
            mean: self.raw_mean(q).clamp(0.0, 1.0),
            std: self.variance(q).sqrt(),
        }
    }

    pub fn predict_many(&self, qs: &[[f64; 2]]) -> Vec<Prediction> {
        qs.par_iter().map(|q| self.predict(q)).collect()
    }

    /// Whether the posterior standard deviation at `q` is at most `threshold`.
    ///
    /// Decides from cheap bounds when possible. Conditioning on a subset of
    /// the data can only give a larger variance, so a small subset
    /// variance proves the gate passes. The full variance is at least
    /// `s - |k|^2 / noise`, which proves it fails far from the data.
    pub fn std_at_most(&self, q: &[f64; 2], threshold: f64) -> bool {
        let t2 = threshold * threshold;
        let s = self.hyper.signal_variance;
        if s <= t2 {
            return true;
        }
        if self.inputs.is_empty() {
            return false;
        }
        let k = self.cross(q);
        let k2: f64 = k.iter().map(|v| v * v).sum();
        let noise = self.hyper.noise_variance + self.jitter;
        if noise > 0.0 && s - k2 / noise > t2 {
            return false;
        }
        let mut order: Vec<usize> = (0..k.len()).collect();
        let m = order.len().min(16);
        order.select_nth_unstable_by(m - 1, |&a, &b| k[b].total_cmp(&k[a]));
        let mut subset: Vec<usize> = order[..m].to_vec();
        subset.sort_unstable();
        let sub = DiscrepancyGp {
            hyper: self.hyper,
            inputs: subset.iter().map(|&i| self.inputs[i]).collect(),
            targets: vec![0.0; m],
            jitter: self.jitter,
            chol: Vec::new(),
            weights: Vec::new(),
        };
        let mut sub = sub;
        if sub.extend_factor(0) && sub.variance(q) <= t2 {
            return true;
        }
        self.variance(q) <= t2
    }

    /// Log marginal likelihood of the current data.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.targets.len() as f64;
        let fit: f64 = self.targets.iter().zip(&self.weights).map(|(y, a)| y * a).sum();
        let logdet: f64 = self.chol.iter().enumerate().map(|(i, r)| r[i].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Refits with the best hyperparameters from a small grid of multiples
    /// of the current ones, by marginal likelihood.
    pub fn grid_search(&mut self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let base = self.hyper;
        let mut best: Option<(f64, DiscrepancyGp)> = None;
        for ls in [0.5, 1.0, 2.0] {
            for sv in [0.5, 1.0, 2.0] {
                let hyper = GpHyper {
                    length_scale: base.length_scale * ls,
                    signal_variance: base.signal_variance * sv,
                    ..base
                };
                let Ok(gp) = DiscrepancyGp::fit(&self.inputs, &self.targets, hyper) else {
                    continue;
                };
                let lml = gp.log_marginal_likelihood();
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, gp));
                }
            }
        }
        match best {
            Some((_, gp)) => {
                *self = gp;
                Ok(())
            }
            None => Err(Error::Numerical("no hyperparameter candidate could be fitted".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyper(noise: f64) -> GpHyper {
        GpHyper {
            length_scale: 0.5,
            signal_variance: 0.25,
            noise_variance: noise,
        }
    }

    fn random_data(n: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let y = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn single_point_interpolation() {
        let gp = DiscrepancyGp::fit(&[[0.3, -0.2]], &[0.5], hyper(1e-4)).unwrap();
        assert!((gp.predict(&[0.3, -0.2]).mean - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn interpolates_at_training_inputs_with_tiny_noise() {
        let (x, y) = random_data(30, 1);
        let gp = DiscrepancyGp::fit(&x, &y, hyper(1e-8)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((gp.predict(xi).mean - yi).abs() <= 1e-3);
        }
    }

    #[test]
    fn far_query_returns_prior() {
        let gp = DiscrepancyGp::fit(&[[0.0, 0.0]], &[0.9], hyper(1e-4)).unwrap();
        let p = gp.predict(&[100.0, 100.0]);
        assert_eq!(p.mean, 0.0);
        assert!((p.std - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_inputs_average() {
        let gp = DiscrepancyGp::fit(&[[1.0, 1.0], [1.0, 1.0]], &[0.0, 1.0], hyper(1e-4)).unwrap();
        assert!((gp.predict(&[1.0, 1.0]).mean - 0.5).abs() < 1e-3);
    }

    #[test]
    fn mirrored_data_gives_mirrored_predictions() {
        let gp = DiscrepancyGp::fit(&[[-1.0, 0.0], [1.0, 0.0]], &[0.4, 0.4], hyper(1e-4)).unwrap();
        let a = gp.predict(&[-0.3, 0.2]);
        let b = gp.predict(&[0.3, 0.2]);
        assert!((a.mean - b.mean).abs() < 1e-12 && (a.std - b.std).abs() < 1e-12);
    }

    #[test]
    fn posterior_variance_below_prior() {
        let (x, y) = random_data(40, 2);
        let gp = DiscrepancyGp::fit(&x, &y, hyper(1e-4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            assert!(gp.variance(&q) <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn variance_non_increasing_as_data_arrive() {
        let (x, y) = random_data(25, 4);
        let queries = [[0.0, 0.0], [1.5, -0.5], [3.0, 3.0]];
        let mut last = vec![0.25; queries.len()];
        let mut gp = DiscrepancyGp::empty(hyper(1e-4)).unwrap();
        for i in 0..x.len() {
            gp.extend(&x[i..i + 1], &y[i..i + 1], usize::MAX).unwrap();
            for (q, l) in queries.iter().zip(last.iter_mut()) {
                let v = gp.variance(q);
                assert!(v <= *l + 1e-8);
                *l = v;
            }
        }
    }

    #[test]
    fn incremental_matches_batch_fit() {
        let (x, y) = random_data(20, 5);
        let batch = DiscrepancyGp::fit(&x, &y, hyper(1e-4)).unwrap();
        let mut inc = DiscrepancyGp::fit(&x[..7], &y[..7], hyper(1e-4)).unwrap();
        inc.extend(&x[7..], &y[7..], usize::MAX).unwrap();
        assert_eq!(inc.chol, batch.chol);
        assert_eq!(inc.weights, batch.weights);
    }

    #[test]
    fn cap_drops_oldest() {
        let (x, y) = random_data(10, 6);
        let mut gp = DiscrepancyGp::fit(&x[..6], &y[..6], hyper(1e-4)).unwrap();
        assert_eq!(gp.extend(&x[6..], &y[6..], 8).unwrap(), 2);
        assert_eq!(gp.inputs, x[2..].to_vec());
        assert_eq!(gp, DiscrepancyGp::fit(&x[2..], &y[2..], hyper(1e-4)).unwrap());
    }

    #[test]
    fn gate_agrees_with_exact_variance() {
        let (x, y) = random_data(60, 7);
        let gp = DiscrepancyGp::fit(&x, &y, hyper(1e-4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let q = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            assert_eq!(gp.std_at_most(&q, 0.3), gp.variance(&q).sqrt() <= 0.3, "query {q:?}");
        }
    }

    #[test]
    fn restore_rebuilds_factorisation() {
        let (x, y) = random_data(12, 9);
        let gp = DiscrepancyGp::fit(&x, &y, hyper(1e-4)).unwrap();
        let bytes = crate::json::to_exact_vec(&gp).unwrap();
        let mut back: DiscrepancyGp = serde_json::from_slice(&bytes).unwrap();
        back.restore().unwrap();
        assert_eq!(back.predict(&[0.1, 0.2]), gp.predict(&[0.1, 0.2]));
    }

    #[test]
    fn rejects_out_of_range_targets() {
        assert!(DiscrepancyGp::fit(&[[0.0, 0.0]], &[1.5], hyper(1e-4)).is_err());
    }
}
