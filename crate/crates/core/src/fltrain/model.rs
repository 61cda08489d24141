//! Fully connected ReLU network stored as one flat parameter vector.
//!
//! Layer `l` occupies `fan_in * fan_out` weights (row-major, one row per
//! input unit) followed by `fan_out` biases. Hidden layers use ReLU and the
//! output layer feeds a softmax with cross-entropy loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, LocalDataset};
use crate::error::{Error, Result};

/// Layer widths of the reference MNIST model.
pub const MNIST_LAYERS: [usize; 4] = [784, 64, 64, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

pub fn param_count(layers: &[usize]) -> usize {
    layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn spans(layers: &[usize]) -> Vec<LayerSpan> {
    let mut off = 0;
    layers
        .windows(2)
        .map(|w| {
            let span = LayerSpan {
                w: off,
                b: off + w[0] * w[1],
                fan_in: w[0],
                fan_out: w[1],
            };
            off += w[0] * w[1] + w[1];
            span
        })
        .collect()
}

impl ModelParams {
    pub fn zeros(layers: &[usize]) -> Self {
        ModelParams {
            values: vec![0.0; param_count(layers)],
            layers: layers.to_vec(),
        }
    }

    /// Uniform weights in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init<R: Rng + ?Sized>(layers: &[usize], rng: &mut R) -> Self {
        let mut p = Self::zeros(layers);
        for s in spans(layers) {
            let r = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
            for w in &mut p.values[s.w..s.b] {
                *w = rng.random_range(-r..=r);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layers.last().unwrap_or(&0)
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub(crate) fn check_len(&self, actual: usize) -> Result<()> {
        if self.values.len() != actual {
            return Err(Error::ShapeMismatch {
                expected: self.values.len(),
                actual,
            });
        }
        Ok(())
    }
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient {
            values: vec![0.0; len],
            batch_size: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-layer activations of one forward pass (index 0 is the input).
struct Activations {
    layers: Vec<Vec<f64>>,
}

fn forward(theta: &ModelParams, x: &[f64]) -> Activations {
    let sp = spans(&theta.layers);
    let mut layers = Vec::with_capacity(sp.len() + 1);
    layers.push(x.to_vec());
    for (l, s) in sp.iter().enumerate() {
        let input = &layers[l];
        let mut out = theta.values[s.b..s.b + s.fan_out].to_vec();
        for (i, &a) in input.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &theta.values[s.w + i * s.fan_out..s.w + (i + 1) * s.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        if l + 1 < sp.len() {
            for o in &mut out {
                *o = o.max(0.0);
            }
        }
        layers.push(out);
    }
    Activations { layers }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities for one input.
pub fn predict_proba(theta: &ModelParams, x: &[f64]) -> Vec<f64> {
    let acts = forward(theta, x);
    softmax(acts.layers.last().map(Vec::as_slice).unwrap_or(&[]))
}

/// Mean cross-entropy over `batch` (indices into the dataset's samples).
pub fn batch_loss(theta: &ModelParams, data: &Dataset, batch: &[usize]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|&i| {
            let acts = forward(theta, data.sample(i));
            let logits = acts.layers.last().expect("output layer");
            log_sum_exp(logits) - logits[data.labels[i] as usize]
        })
        .sum();
    total / batch.len() as f64
}

/// Backpropagated gradient of the mean cross-entropy over `batch`, where the
/// entries of `batch` index into `data.indices`.
pub fn compute_gradient(theta: &ModelParams, data: &LocalDataset, batch: &[usize]) -> Result<Gradient> {
    let global: Vec<usize> = batch.iter().map(|&b| data.indices[b]).collect();
    gradient_on(theta, &data.data, &global)
}

/// Same as [`compute_gradient`] with indices straight into `data`.
pub fn gradient_on(theta: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(Error::Config("gradient batch must not be empty".into()));
    }
    theta.check_len(param_count(&theta.layers))?;
    let sp = spans(&theta.layers);
    let mut grad = vec![0.0; theta.values.len()];
    let mut loss = 0.0;

    for &idx in batch {
        let acts = forward(theta, data.sample(idx));
        let logits = acts.layers.last().expect("output layer");
        let label = data.labels[idx] as usize;
        loss += log_sum_exp(logits) - logits[label];

        let mut delta = softmax(logits);
        delta[label] -= 1.0;
        for l in (0..sp.len()).rev() {
            let s = sp[l];
            let input = &acts.layers[l];
            for (i, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut grad[s.w + i * s.fan_out..s.w + (i + 1) * s.fan_out];
                for (g, d) in row.iter_mut().zip(&delta) {
                    *g += a * d;
                }
            }
            for (g, d) in grad[s.b..s.b + s.fan_out].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let prev: Vec<f64> = (0..s.fan_in)
                    .map(|i| {
                        if input[i] <= 0.0 {
                            return 0.0;
                        }
                        let row = &theta.values[s.w + i * s.fan_out..s.w + (i + 1) * s.fan_out];
                        row.iter().zip(&delta).map(|(w, d)| w * d).sum()
                    })
                    .collect();
                delta = prev;
            }
        }
    }

    let n = batch.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok(Gradient {
        values: grad,
        batch_size: batch.len(),
    })
}

/// `theta - eta * g`, elementwise.
pub fn local_update(theta: &ModelParams, g: &Gradient, eta: f64) -> Result<ModelParams> {
    theta.check_len(g.values.len())?;
    Ok(ModelParams {
        values: theta
            .values
            .iter()
            .zip(&g.values)
            .map(|(t, g)| t - eta * g)
            .collect(),
        layers: theta.layers.clone(),
    })
}

/// Index of the largest logit; ties go to the lower class.
pub fn predict(theta: &ModelParams, x: &[f64]) -> usize {
    let acts = forward(theta, x);
    let logits = acts.layers.last().expect("output layer");
    let mut best = 0;
    for (k, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = k;
        }
    }
    best
}

/// Fraction of `testset` classified correctly. An empty set scores 0.
pub fn evaluate(theta: &ModelParams, testset: &Dataset) -> f64 {
    if testset.is_empty() {
        return 0.0;
    }
    let correct = (0..testset.len())
        .filter(|&i| predict(theta, testset.sample(i)) == testset.labels[i] as usize)
        .count();
    correct as f64 / testset.len() as f64
}
