//! Baseline head: an affine layer over token embeddings followed by a
//! softmax over the tag inventory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::Tag;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHead {
    /// Output tags in logit order.
    pub labels: Vec<Tag>,
    pub dim: usize,
    /// Row-major `labels.len() × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BaselineHead {
    pub fn zeros(labels: Vec<Tag>, dim: usize) -> Self {
        let l = labels.len();
        Self {
            labels,
            dim,
            weights: vec![0.0; l * dim],
            bias: vec![0.0; l],
        }
    }

    /// Weights uniform in ±1/√dim, zero bias.
    pub fn init(labels: Vec<Tag>, dim: usize, rng: &mut impl Rng) -> Self {
        let mut head = Self::zeros(labels, dim);
        let bound = 1.0 / (dim as f64).sqrt();
        for w in &mut head.weights {
            *w = rng.random_range(-bound..=bound);
        }
        head
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_of(&self, tag: &Tag) -> Option<usize> {
        self.labels.iter().position(|t| t == tag)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, TrainError> {
        if x.len() != self.dim {
            return Err(TrainError::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    /// Index of the largest logit; the lowest index wins ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize, TrainError> {
        let z = self.logits(x)?;
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities softmax(W·x + b).
pub fn baseline_forward(x: &[f64], head: &BaselineHead) -> Result<Vec<f64>, TrainError> {
    Ok(softmax(&head.logits(x)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineGradients {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// ∂loss/∂x.
    pub input: Vec<f64>,
}

/// Cross-entropy of `label` and its gradients.
pub fn baseline_loss(x: &[f64], label: usize, head: &BaselineHead) -> Result<BaselineGradients, TrainError> {
    if label >= head.num_labels() {
        return Err(TrainError::Label(label));
    }
    let z = head.logits(x)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let mut dz = softmax(&z);
    dz[label] -= 1.0;
    let mut weights = vec![0.0; head.weights.len()];
    let mut input = vec![0.0; head.dim];
    for (k, g) in dz.iter().enumerate() {
        let row = &head.weights[k * head.dim..(k + 1) * head.dim];
        for j in 0..head.dim {
            weights[k * head.dim + j] = g * x[j];
            input[j] += g * row[j];
        }
    }
    Ok(BaselineGradients {
        loss: lse - z[label],
        weights,
        bias: dz,
        input,
    })
}
