//! Fully connected regression network mapping flattened assessment inputs to
//! embedding coordinates.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SafetyAssessmentInput;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 300,
        }
    }
}

/// Weights are stored row-major as `out x in` per layer; hidden layers use
/// `activation`, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNetwork {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Training RMSE in target units; zero for an untrained network.
    pub train_rmse: f64,
}

/// Layer parameters in matrix form.
#[derive(Debug, Clone)]
struct Params {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
}

impl Params {
    fn zeros_like(&self) -> Params {
        Params {
            w: self.w.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            b: self.b.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }
}

impl MappingNetwork {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least one layer")
    }

    fn params(&self) -> Params {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            w.push(Array2::from_shape_vec((pair[1], pair[0]), self.weights[l].clone()).expect("layer shape"));
            b.push(Array1::from_vec(self.biases[l].clone()));
        }
        Params { w, b }
    }

    fn set_params(&mut self, p: &Params) {
        self.weights = p.w.iter().map(|w| w.iter().copied().collect()).collect();
        self.biases = p.b.iter().map(|b| b.to_vec()).collect();
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let layers = self.layer_sizes.len();
        if layers < 2 || self.weights.len() != layers - 1 || self.biases.len() != layers - 1 {
            return Err(Error::invalid("network layer description is inconsistent"));
        }
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            if self.weights[l].len() != pair[0] * pair[1] || self.biases[l].len() != pair[1] {
                return Err(Error::invalid(format!("layer {l} has wrong parameter count")));
            }
        }
        if self.input_mean.len() != self.input_dim() || self.input_scale.len() != self.input_dim() {
            return Err(Error::invalid("standardisation vectors have wrong length"));
        }
        if self.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("standardisation scales must be positive"));
        }
        Ok(())
    }

    /// Forward pass on one raw (unstandardised) input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains non-finite values"));
        }
        let z = Array2::from_shape_vec((1, x.len()), self.standardize(x)).expect("row shape");
        let acts = forward_batch(&self.params(), self.activation, z.view());
        Ok(acts.last().expect("output layer").row(0).to_vec())
    }

    /// Forward pass on many raw inputs at once.
    pub fn forward_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.input_dim();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::invalid("input dimension mismatch"));
        }
        let params = self.params();
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(1024) {
            let flat: Vec<f64> = chunk.iter().flat_map(|x| self.standardize(x)).collect();
            let z = Array2::from_shape_vec((chunk.len(), d), flat).expect("batch shape");
            let acts = forward_batch(&params, self.activation, z.view());
            out.extend(acts.last().expect("output").rows().into_iter().map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Jacobian of the output with respect to the raw input (`out x in`), by
    /// backpropagation.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.forward(x)?;
        let params = self.params();
        let z = Array2::from_shape_vec((1, x.len()), self.standardize(x)).expect("row shape");
        let acts = forward_batch(&params, self.activation, z.view());
        let n_out = self.output_dim();
        let mut jac = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut delta = Array2::zeros((1, n_out));
            delta[[0, o]] = 1.0;
            for l in (0..params.w.len()).rev() {
                if l + 1 < params.w.len() {
                    let act = &acts[l + 1];
                    delta.zip_mut_with(act, |d, &a| *d *= self.activation.derivative_from_output(a));
                }
                delta = delta.dot(&params.w[l]);
            }
            jac.push(
                delta
                    .row(0)
                    .iter()
                    .zip(&self.input_scale)
                    .map(|(g, s)| g / s)
                    .collect(),
            );
        }
        Ok(jac)
    }

    /// Mean squared error (averaged over samples and outputs) on raw inputs
    /// and targets, with its gradient flattened in the order of `weights`
    /// then `biases`.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let d = self.input_dim();
        let flat: Vec<f64> = xs.iter().flat_map(|x| self.standardize(x)).collect();
        let x = Array2::from_shape_vec((xs.len(), d), flat).map_err(|e| Error::invalid(e.to_string()))?;
        let t = Array2::from_shape_vec((ys.len(), self.output_dim()), ys.iter().flatten().copied().collect())
            .map_err(|e| Error::invalid(e.to_string()))?;
        let params = self.params();
        let (loss, grads) = backprop(&params, self.activation, x.view(), t.view());
        let mut flat_grad: Vec<f64> = grads.w.iter().flat_map(|w| w.iter().copied()).collect();
        flat_grad.extend(grads.b.iter().flat_map(|b| b.iter().copied()));
        Ok((loss, flat_grad))
    }

    /// All parameters flattened in the order used by
    /// [`MappingNetwork::loss_and_gradient`].
    pub fn flat_params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.biases).flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = it.next().expect("enough parameters");
            }
        }
    }

    /// Randomly initialised network (Glorot uniform) with identity
    /// standardisation.
    pub fn random(layer_sizes: &[usize], activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let limit = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
            weights.push((0..pair[0] * pair[1]).map(|_| rng.random_range(-limit..limit)).collect());
            biases.push(vec![0.0; pair[1]]);
        }
        MappingNetwork {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            input_mean: vec![0.0; layer_sizes[0]],
            input_scale: vec![1.0; layer_sizes[0]],
            train_rmse: 0.0,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let net: MappingNetwork =
            serde_json::from_slice(bytes).map_err(|e| Error::invalid(format!("network json: {e}")))?;
        net.validate()?;
        Ok(net)
    }

    pub fn check(&self) -> Result<()> {
        self.validate()
    }
}

/// Activations per layer, input first.
fn forward_batch(p: &Params, act: Activation, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts = vec![x.to_owned()];
    for l in 0..p.w.len() {
        let mut z = acts[l].dot(&p.w[l].t());
        z += &p.b[l];
        if l + 1 < p.w.len() {
            z.mapv_inplace(|v| act.apply(v));
        }
        acts.push(z);
    }
    acts
}

/// MSE loss over all outputs and its parameter gradient.
fn backprop(p: &Params, act: Activation, x: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Params) {
    let acts = forward_batch(p, act, x);
    let out = acts.last().expect("output");
    let count = (out.nrows() * out.ncols()) as f64;
    let diff = out - &t;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
    let mut delta = diff * (2.0 / count);
    let mut grads = p.zeros_like();
    for l in (0..p.w.len()).rev() {
        grads.w[l] = delta.t().dot(&acts[l]);
        grads.b[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut back = delta.dot(&p.w[l]);
            back.zip_mut_with(&acts[l], |d, &a| *d *= act.derivative_from_output(a));
            delta = back;
        }
    }
    (loss, grads)
}

/// Per-column mean and standard deviation. Constant columns get
/// `constant_scale` instead of a zero deviation.
fn column_stats(rows: &[Vec<f64>], dim: usize, constant_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                constant_scale
            }
        })
        .collect();
    (mean, scale)
}

/// Trains a network reproducing `targets` from `inputs` with Adam on the mean
/// squared error. Inputs and targets are standardised internally; the target
/// scaling is folded into the output layer of the returned network.
pub fn train_mapping(inputs: &[Vec<f64>], targets: &[Vec<f64>], cfg: &NetConfig, seed: u64) -> Result<MappingNetwork> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid("inputs and targets must be non-empty and of equal count"));
    }
    let d_in = inputs[0].len();
    let d_out = targets[0].len();
    if d_in == 0 || d_out == 0 {
        return Err(Error::invalid("zero-width input or target"));
    }
    if inputs.iter().any(|x| x.len() != d_in) || targets.iter().any(|y| y.len() != d_out) {
        return Err(Error::invalid("ragged inputs or targets"));
    }
    if inputs.iter().chain(targets).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training values"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }

    let (in_mean, in_scale) = column_stats(inputs, d_in, 1.0);
    // a constant target column is reproduced exactly by its mean
    let (out_mean, out_scale) = column_stats(targets, d_out, 0.0);
    let n = inputs.len();
    let x = Array2::from_shape_fn((n, d_in), |(i, k)| (inputs[i][k] - in_mean[k]) / in_scale[k]);
    let t = Array2::from_shape_fn((n, d_out), |(i, k)| {
        if out_scale[k] > 0.0 {
            (targets[i][k] - out_mean[k]) / out_scale[k]
        } else {
            0.0
        }
    });

    let mut sizes = vec![d_in];
    sizes.extend(&cfg.hidden);
    sizes.push(d_out);
    let mut net = MappingNetwork::random(&sizes, cfg.activation, seed);
    let mut params = net.params();
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let tb = t.select(Axis(0), batch);
            let (loss, grads) = backprop(&params, cfg.activation, xb.view(), tb.view());
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            let c1 = 1.0 - beta1.powi(step);
            let c2 = 1.0 - beta2.powi(step);
            let lr = cfg.learning_rate;
            let adam = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            for l in 0..params.w.len() {
                ndarray::Zip::from(&mut params.w[l])
                    .and(&grads.w[l])
                    .and(&mut m.w[l])
                    .and(&mut v.w[l])
                    .for_each(|p, &g, m, v| adam(p, g, m, v));
                ndarray::Zip::from(&mut params.b[l])
                    .and(&grads.b[l])
                    .and(&mut m.b[l])
                    .and(&mut v.b[l])
                    .for_each(|p, &g, m, v| adam(p, g, m, v));
            }
        }
        if !(epoch_loss / n as f64).is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
    }

    // fold the target standardisation into the output layer
    let last = params.w.len() - 1;
    for o in 0..d_out {
        params.w[last].slice_mut(s![o, ..]).mapv_inplace(|w| w * out_scale[o]);
        params.b[last][o] = params.b[last][o] * out_scale[o] + out_mean[o];
    }
    net.set_params(&params);
    net.input_mean = in_mean;
    net.input_scale = in_scale;

    let preds = net.forward_many(inputs)?;
    let sq: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    net.train_rmse = (sq / n as f64).sqrt();
    if !net.train_rmse.is_finite() {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            loss: net.train_rmse,
        });
    }
    Ok(net)
}

/// Embedding coordinates of an assessment input.
pub fn map_input(net: &MappingNetwork, x: &SafetyAssessmentInput) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(Error::invalid("assessment input contains non-finite values"));
    }
    net.forward(&x.flatten())
}
