//! Multinomial logistic regression with hand-written gradients, trained on
//! seeded synthetic Gaussian clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParameterVector, Seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSoftmaxModel {
    pub classes: usize,
    pub features: usize,
    /// c×d, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn param_count(classes: usize, features: usize) -> usize {
    classes * features + classes
}

impl DenseSoftmaxModel {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            weights: vec![0.0; classes * features],
            bias: vec![0.0; classes],
        }
    }

    pub fn from_flat(classes: usize, features: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != param_count(classes, features) {
            return Err(Error::invalid(format!(
                "expected {} parameters for a {classes}x{features} model, got {}",
                param_count(classes, features),
                flat.len()
            )));
        }
        let (w, b) = flat.split_at(classes * features);
        Ok(Self {
            classes,
            features,
            weights: w.to_vec(),
            bias: b.to_vec(),
        })
    }

    /// W row-major, then b.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(param_count(self.classes, self.features));
        out.extend_from_slice(&self.weights);
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        param_count(self.classes, self.features)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|i| {
                let row = &self.weights[i * self.features..(i + 1) * self.features];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[i]
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_batch(model: &DenseSoftmaxModel, batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for ex in batch {
        if ex.x.len() != model.features {
            return Err(Error::invalid(format!(
                "example has {} features, model expects {}",
                ex.x.len(),
                model.features
            )));
        }
        if ex.y >= model.classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                ex.y, model.classes
            )));
        }
        if ex.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature"));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy and the per-example class probabilities.
pub fn forward_loss(model: &DenseSoftmaxModel, batch: &[Example]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(model, batch)?;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(batch.len());
    for ex in batch {
        let z = model.logits(&ex.x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[ex.y];
        probs.push(softmax(&z));
    }
    Ok((loss / batch.len() as f64, probs))
}

/// Batch-mean gradient of the cross-entropy, flattened like the model.
pub fn gradient(model: &DenseSoftmaxModel, batch: &[Example]) -> Result<ParameterVector> {
    check_batch(model, batch)?;
    let (c, d) = (model.classes, model.features);
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    for ex in batch {
        let mut dz = softmax(&model.logits(&ex.x));
        dz[ex.y] -= 1.0;
        for i in 0..c {
            let row = &mut gw[i * d..(i + 1) * d];
            for (g, x) in row.iter_mut().zip(&ex.x) {
                *g += dz[i] * x;
            }
            gb[i] += dz[i];
        }
    }
    let inv = batch.len() as f64;
    let mut flat: Vec<f64> = gw.into_iter().chain(gb).collect();
    for g in &mut flat {
        *g /= inv;
    }
    ParameterVector::new(flat)
}

pub fn accuracy(model: &DenseSoftmaxModel, data: &[Example]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.iter().filter(|ex| model.predict(&ex.x) == ex.y).count();
    hits as f64 / data.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Full-batch descent epochs; returns the new parameters.
    FedAvg,
    /// One full-batch gradient, unstepped.
    FedSgd,
}

/// θ ← θ − η·g, in place.
pub fn descend(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

pub fn local_train(
    model: &DenseSoftmaxModel,
    data: &[Example],
    epochs: u32,
    lr: f64,
    mode: TrainMode,
) -> Result<ParameterVector> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    match mode {
        TrainMode::FedSgd => gradient(model, data),
        TrainMode::FedAvg => {
            let mut current = model.clone();
            for _ in 0..epochs {
                let g = gradient(&current, data)?;
                let nw = current.weights.len();
                descend(&mut current.weights, &g[..nw], lr);
                let nb = current.bias.len();
                descend(&mut current.bias, &g[g.len() - nb..], lr);
            }
            ParameterVector::new(current.flatten())
        }
    }
}

/// Parameters of a synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub features: usize,
    /// Distance scale of the class means.
    pub separation: f64,
    /// Fraction of a party's examples drawn from its two dominant classes.
    /// `None` means IID labels.
    pub skew: Option<f64>,
    pub seed: Seed,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.features < self.classes {
            return Err(Error::invalid(format!(
                "synthetic clusters need features >= classes ({} < {})",
                self.features, self.classes
            )));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::invalid("separation must be finite and non-negative"));
        }
        if let Some(rho) = self.skew {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::invalid(format!("skew must be in [0, 1], got {rho}")));
            }
        }
        Ok(())
    }

    /// Class mean: vertex of a centred, scaled simplex in the first `c`
    /// coordinates, so balanced data has zero mean.
    pub fn class_mean(&self, y: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.features];
        let shift = self.separation / self.classes as f64;
        for v in m.iter_mut().take(self.classes) {
            *v = -shift;
        }
        m[y] += self.separation;
        m
    }

    /// Deterministic examples for one party. Each party draws from its own
    /// stream, so splits never share examples.
    pub fn party_data(&self, party_index: usize, n: usize) -> Vec<Example> {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(b"party");
        h.update((party_index as u32).to_be_bytes());
        let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
        let dominant = [
            (2 * party_index) % self.classes,
            (2 * party_index + 1) % self.classes,
        ];
        (0..n)
            .map(|_| {
                let y = match self.skew {
                    Some(rho) if rng.gen::<f64>() < rho => dominant[rng.gen_range(0..2)],
                    _ => rng.gen_range(0..self.classes),
                };
                let mut x = self.class_mean(y);
                for v in &mut x {
                    *v += rng.sample::<f64, _>(StandardNormal);
                }
                Example { x, y }
            })
            .collect()
    }
}
