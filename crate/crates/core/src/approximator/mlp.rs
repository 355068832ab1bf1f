//! Fully connected ReLU network with a softmax output, trained by Adam on
//! mini-batch cross-entropy.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LabeledSaDataset;
use crate::error::{Error, Result};
use crate::mdp::{ActionId, Observation};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![1000, 1000],
            learning_rate: 0.005,
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::spec("hidden", "layer sizes must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::spec("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::spec("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::spec("batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Dense {
    /// `out × in`.
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Dense {
    fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Dense {
            w: DMatrix::from_fn(outputs, inputs, |_, _| rng.gen_range(-bound..bound)),
            b: DVector::from_fn(outputs, |_, _| rng.gen_range(-bound..bound)),
        }
    }

    /// `x · wᵀ + b` for a batch with one example per row.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.w.transpose();
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.b[j]);
        }
        z
    }
}

/// Network input is the observation vector followed by a one-hot action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

struct Trace {
    /// Inputs to each layer; `acts[0]` is the batch itself.
    acts: Vec<DMatrix<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DMatrix<f64>>,
    logits: DMatrix<f64>,
}

impl Mlp {
    /// PyTorch-style initialization: every weight and bias uniform in `±1/√fan_in`.
    pub fn new(inputs: usize, hidden: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let layers = sizes.windows(2).map(|w| Dense::random(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("at least one layer").w.nrows()
    }

    fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.w.nrows()).collect()
    }

    pub fn encode(obs: &[f64], action: ActionId, action_count: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(obs.len() + action_count);
        x.extend_from_slice(obs);
        x.extend((0..action_count).map(|a| if a == action.0 { 1.0 } else { 0.0 }));
        x
    }

    pub(super) fn fit(data: &LabeledSaDataset, obs_dim: usize, cfg: &MlpConfig, warm: Option<&Mlp>) -> Result<Self> {
        let inputs = obs_dim + data.action_count();
        let classes = data.class_count();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = Mlp::new(inputs, &cfg.hidden, classes, &mut rng);
        if let Some(prev) = warm {
            if prev.input_dim() == inputs && prev.hidden_sizes() == cfg.hidden {
                let top = net.layers.len() - 1;
                net.layers[..top].clone_from_slice(&prev.layers[..top]);
            }
        }
        let rows: Vec<_> = data.active_rows().collect();
        let n = rows.len();
        let x = DMatrix::from_fn(n, inputs, |i, j| {
            let v = rows[i].state.as_vector().expect("validated vector rows");
            if j < obs_dim {
                v[j]
            } else if j - obs_dim == rows[i].action.0 {
                1.0
            } else {
                0.0
            }
        });
        let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();

        let mut m: Vec<(DMatrix<f64>, DVector<f64>)> = net
            .layers
            .iter()
            .map(|l| (l.w.map(|_| 0.0), l.b.map(|_| 0.0)))
            .collect();
        let mut v = m.clone();
        let mut t = 0i32;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let xb = x.select_rows(batch);
                let lb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let (_, grads) = net.backprop(&xb, &lb);
                t += 1;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for ((layer, (gw, gb)), ((mw, mb), (vw, vb))) in
                    net.layers.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut()))
                {
                    adam(&mut layer.w, &gw, mw, vw, cfg.learning_rate, c1, c2);
                    adam(&mut layer.b, &gb, mb, vb, cfg.learning_rate, c1, c2);
                }
            }
        }
        if net.layers.iter().any(|l| l.w.iter().chain(l.b.iter()).any(|p| !p.is_finite())) {
            return Err(Error::Numeric("mlp parameters diverged".into()));
        }
        Ok(net)
    }

    fn forward(&self, x: &DMatrix<f64>) -> Trace {
        let mut acts = vec![x.clone()];
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let z = layer.apply(acts.last().expect("non-empty"));
            acts.push(z.map(|v| v.max(0.0)));
            pre.push(z);
        }
        let logits = self.layers[last].apply(acts.last().expect("non-empty"));
        Trace { acts, pre, logits }
    }

    /// Mean cross-entropy and its gradient for every layer.
    fn backprop(&self, x: &DMatrix<f64>, labels: &[usize]) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
        let trace = self.forward(x);
        let b = x.nrows() as f64;
        let mut probs = trace.logits.clone();
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let mut row = probs.row_mut(i);
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let sum = row.sum();
            row /= sum;
            loss -= (row[label]).max(f64::MIN_POSITIVE).ln();
            row[label] -= 1.0;
        }
        let mut delta = probs / b;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let gw = delta.transpose() * &trace.acts[k];
            let gb = delta.row_sum().transpose();
            if k > 0 {
                let mut back = &delta * &layer.w;
                back.zip_apply(&trace.pre[k - 1], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = back;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (loss / b, grads)
    }

    /// Mean cross-entropy over the rows of `x` (already encoded) and the
    /// gradient with respect to [`Mlp::parameters`].
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let (loss, grads) = self.backprop(x, labels);
        let flat = grads
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
            .collect();
        (loss, flat)
    }

    pub fn loss(&self, x: &DMatrix<f64>, labels: &[usize]) -> f64 {
        let logits = self.forward(x).logits;
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.max();
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss / x.nrows() as f64
    }

    /// All weights and biases, layer by layer, weights column-major.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = it.next().expect("parameter count"));
        }
        assert!(it.next().is_none(), "parameter count");
    }

    fn softmax_rows(logits: DMatrix<f64>) -> Vec<Vec<f64>> {
        logits
            .row_iter()
            .map(|row| {
                let max = row.max();
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    pub(super) fn predict(&self, obs: &[f64], a: ActionId, action_count: usize) -> Vec<f64> {
        let x = DMatrix::from_row_slice(1, self.input_dim(), &Self::encode(obs, a, action_count));
        Self::softmax_rows(self.forward(&x).logits).pop().expect("one row")
    }

    pub(super) fn predict_many(&self, queries: &[(&Observation, ActionId)], action_count: usize) -> Vec<Vec<f64>> {
        let dim = self.input_dim();
        queries
            .par_chunks(512)
            .flat_map_iter(|chunk| {
                let data: Vec<f64> = chunk
                    .iter()
                    .flat_map(|(s, a)| Self::encode(s.as_vector().expect("checked"), *a, action_count))
                    .collect();
                let x = DMatrix::from_row_slice(chunk.len(), dim, &data);
                Self::softmax_rows(self.forward(&x).logits)
            })
            .collect()
    }
}

fn adam<D: nalgebra::Dim, C: nalgebra::Dim, S>(
    p: &mut nalgebra::Matrix<f64, D, C, S>,
    g: &nalgebra::Matrix<f64, D, C, S>,
    m: &mut nalgebra::Matrix<f64, D, C, S>,
    v: &mut nalgebra::Matrix<f64, D, C, S>,
    lr: f64,
    c1: f64,
    c2: f64,
) where
    S: nalgebra::StorageMut<f64, D, C>,
{
    for (((p, g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}
