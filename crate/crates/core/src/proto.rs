//! Prototypical classification head.
//!
//! Each entity class k has a centroid c_k, the mean embedding of its support
//! tokens. A token x is scored by the vector v = (d_O, d(x, c_0), …,
//! d(x, c_{K-1})), where d_O is a learned scalar acting as the "close enough"
//! threshold for the O class, and class probabilities are softmax(-v).
//! Classes without support get a fixed large distance instead.
//!
//! Label index 0 is always O; entity class k has label index k + 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, TokenRef};
use crate::encoder::{Encoder, EncoderError, EncoderMode};

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("vector dimension {found} does not match {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("non-finite value in distance vector")]
    NonFinite,
    #[error("running-centroid decay {0} outside (0, 1]")]
    InvalidDecay(f64),
    #[error("missing distance must be positive, got {0}")]
    InvalidMissingDistance(f64),
    #[error("no centroids available")]
    NoCentroids,
    #[error("episode has no queries")]
    EmptyQuery,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub const DEFAULT_MISSING_DISTANCE: f64 = 400.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Metric::Euclidean => sq.sqrt(),
            Metric::SquaredEuclidean => sq,
        }
    }

    /// ∂d(x, c)/∂x; the gradient with respect to c is its negation.
    /// At x = c the Euclidean subgradient 0 is used.
    fn grad_wrt_x(self, x: &[f64], c: &[f64]) -> Vec<f64> {
        match self {
            Metric::SquaredEuclidean => x.iter().zip(c).map(|(a, b)| 2.0 * (a - b)).collect(),
            Metric::Euclidean => {
                let d = self.distance(x, c);
                if d == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    x.iter().zip(c).map(|(a, b)| (a - b) / d).collect()
                }
            }
        }
    }
}

/// Per-class centroids; `None` marks a class with no support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    dim: usize,
    slots: Vec<Option<Vec<f64>>>,
}

impl Centroids {
    pub fn empty(num_classes: usize, dim: usize) -> Self {
        Self {
            dim,
            slots: vec![None; num_classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.slots.get(class)?.as_deref()
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|_| i))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub fn set(&mut self, class: usize, value: Vec<f64>) -> Result<(), ProtoError> {
        if value.len() != self.dim {
            return Err(ProtoError::Dimension {
                expected: self.dim,
                found: value.len(),
            });
        }
        let classes = self.slots.len();
        let slot = self
            .slots
            .get_mut(class)
            .ok_or(ProtoError::ClassOutOfRange { class, classes })?;
        *slot = Some(value);
        Ok(())
    }
}

/// Mean embedding of each class's support elements. Classes with no
/// support element stay absent.
pub fn compute_centroids(
    support: &[(&[f64], usize)],
    num_classes: usize,
    dim: usize,
) -> Result<Centroids, ProtoError> {
    let mut sums = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for &(x, class) in support {
        if x.len() != dim {
            return Err(ProtoError::Dimension {
                expected: dim,
                found: x.len(),
            });
        }
        if class >= num_classes {
            return Err(ProtoError::ClassOutOfRange {
                class,
                classes: num_classes,
            });
        }
        counts[class] += 1;
        for (s, v) in sums[class].iter_mut().zip(x) {
            *s += v;
        }
    }
    let slots = sums
        .into_iter()
        .zip(counts)
        .map(|(sum, n)| (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect()))
        .collect();
    Ok(Centroids { dim, slots })
}

/// v = (d_O, dist_0, …, dist_{K-1}).
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceVector {
    pub values: Vec<f64>,
    pub metric: Metric,
}

impl DistanceVector {
    pub fn d_o(&self) -> f64 {
        self.values[0]
    }

    pub fn class_distance(&self, class: usize) -> f64 {
        self.values[class + 1]
    }

    /// Label index with the smallest entry; ties go to the lower index, so
    /// O wins ties.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v < self.values[best] {
                best = i;
            }
        }
        best
    }
}

pub fn distance_vector(
    x: &[f64],
    centroids: &Centroids,
    d_o: f64,
    missing_distance: f64,
    metric: Metric,
) -> Result<DistanceVector, ProtoError> {
    if x.len() != centroids.dim {
        return Err(ProtoError::Dimension {
            expected: centroids.dim,
            found: x.len(),
        });
    }
    let mut values = Vec::with_capacity(centroids.num_classes() + 1);
    values.push(d_o);
    for slot in &centroids.slots {
        values.push(match slot {
            Some(c) => metric.distance(x, c),
            None => missing_distance,
        });
    }
    Ok(DistanceVector { values, metric })
}

/// softmax(-v) with max-shift stabilization.
pub fn class_probabilities(v: &DistanceVector) -> Result<Vec<f64>, ProtoError> {
    softmax_neg(&v.values)
}

pub(crate) fn softmax_neg(values: &[f64]) -> Result<Vec<f64>, ProtoError> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(ProtoError::NonFinite);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|v| (min - v).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// -log softmax(-v)[label], computed as logsumexp(-v) + v[label].
pub(crate) fn neg_log_prob(values: &[f64], label: usize) -> f64 {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let lse: f64 = values.iter().map(|v| (min - v).exp()).sum::<f64>().ln() - min;
    lse + values[label]
}

/// Exponentially decayed average of per-step batch centroids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningCentroids {
    alpha: f64,
    centroids: Centroids,
}

impl RunningCentroids {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self, ProtoError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ProtoError::InvalidDecay(alpha));
        }
        Ok(Self {
            alpha,
            centroids: Centroids::empty(num_classes, dim),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    /// c ← α·c_batch + (1-α)·c for classes present in the batch; the first
    /// observation of a class is taken as is.
    pub fn update(&mut self, batch: &Centroids) -> Result<(), ProtoError> {
        update_running_centroids(self, batch, self.alpha)
    }
}

pub fn update_running_centroids(
    running: &mut RunningCentroids,
    batch: &Centroids,
    alpha: f64,
) -> Result<(), ProtoError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ProtoError::InvalidDecay(alpha));
    }
    if batch.dim != running.centroids.dim {
        return Err(ProtoError::Dimension {
            expected: running.centroids.dim,
            found: batch.dim,
        });
    }
    for (slot, new) in running.centroids.slots.iter_mut().zip(&batch.slots) {
        let Some(new) = new else { continue };
        match slot {
            Some(old) => {
                for (o, n) in old.iter_mut().zip(new) {
                    *o = alpha * n + (1.0 - alpha) * *o;
                }
            }
            None => *slot = Some(new.clone()),
        }
    }
    running.alpha = alpha;
    Ok(())
}

/// Trainable and inference state of the head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeState {
    /// Entity class names in label order (label index k + 1).
    pub classes: Vec<String>,
    pub d_o: f64,
    pub missing_distance: f64,
    pub metric: Metric,
    /// Centroids used for exact inference.
    pub centroids: Centroids,
    pub running: RunningCentroids,
}

impl PrototypeState {
    pub fn new(
        classes: Vec<String>,
        dim: usize,
        d_o: f64,
        missing_distance: f64,
        metric: Metric,
        alpha: f64,
    ) -> Result<Self, ProtoError> {
        if missing_distance.is_nan() || missing_distance <= 0.0 {
            return Err(ProtoError::InvalidMissingDistance(missing_distance));
        }
        let k = classes.len();
        Ok(Self {
            classes,
            d_o,
            missing_distance,
            metric,
            centroids: Centroids::empty(k, dim),
            running: RunningCentroids::new(k, dim, alpha)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim
    }

    /// Entity class name for a label index; `None` for O.
    pub fn label_name(&self, label: usize) -> Option<&str> {
        label.checked_sub(1).map(|k| self.classes[k].as_str())
    }

    pub fn label_of(&self, entity_type: Option<&str>) -> Option<usize> {
        match entity_type {
            None => Some(0),
            Some(t) => self.classes.iter().position(|c| c == t).map(|k| k + 1),
        }
    }

    pub fn distances(&self, x: &[f64], use_running: bool) -> Result<DistanceVector, ProtoError> {
        let centroids = if use_running {
            self.running.centroids()
        } else {
            &self.centroids
        };
        distance_vector(x, centroids, self.d_o, self.missing_distance, self.metric)
    }

    /// Recomputes exact centroids over every token of `dataset`, labelled by
    /// observed tags.
    pub fn fit_exact_centroids<E: Encoder + ?Sized>(
        &mut self,
        encoder: &E,
        dataset: &Dataset,
    ) -> Result<(), ProtoError> {
        let mut vectors = Vec::new();
        for at in dataset.token_refs() {
            let tok = dataset.token(at).expect("valid ref");
            if let Some(label) = self.label_of(tok.observed_tag.entity_type()) {
                if label > 0 {
                    vectors.push((encoder.encode(dataset, at)?, label - 1));
                }
            }
        }
        let support: Vec<(&[f64], usize)> = vectors.iter().map(|(v, c)| (v.as_slice(), *c)).collect();
        self.centroids = compute_centroids(&support, self.num_classes(), self.dim())?;
        Ok(())
    }
}

/// Most probable label (argmin of v); O wins ties, then lower class index.
pub fn predict(x: &[f64], state: &PrototypeState, use_running: bool) -> Result<usize, ProtoError> {
    let centroids = if use_running {
        state.running.centroids()
    } else {
        &state.centroids
    };
    if centroids.is_empty() {
        return Err(ProtoError::NoCentroids);
    }
    Ok(state.distances(x, use_running)?.argmin())
}

/// Loss and gradients of one episode with respect to the embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingGradients {
    pub loss: f64,
    pub d_o: f64,
    pub query: Vec<Vec<f64>>,
    pub support: Vec<Vec<f64>>,
    pub centroids: Centroids,
}

/// Mean cross-entropy of the query labels under softmax(-v), with centroids
/// built from `support`. Gradients flow into both query and support
/// embeddings; the missing-class distance is a constant.
pub fn episode_loss(
    support: &[(&[f64], usize)],
    queries: &[(&[f64], usize)],
    state: &PrototypeState,
) -> Result<EmbeddingGradients, ProtoError> {
    if queries.is_empty() {
        return Err(ProtoError::EmptyQuery);
    }
    let k = state.num_classes();
    let dim = state.dim();
    let centroids = compute_centroids(support, k, dim)?;
    let mut class_grad = vec![vec![0.0; dim]; k];
    let mut query_grads = Vec::with_capacity(queries.len());
    let mut loss = 0.0;
    let mut d_o_grad = 0.0;
    let scale = 1.0 / queries.len() as f64;

    for &(x, label) in queries {
        if label > k {
            return Err(ProtoError::ClassOutOfRange { class: label, classes: k + 1 });
        }
        let v = distance_vector(x, &centroids, state.d_o, state.missing_distance, state.metric)?;
        if v.values.iter().any(|d| !d.is_finite()) {
            return Err(ProtoError::NonFinite);
        }
        loss += neg_log_prob(&v.values, label) * scale;
        let p = softmax_neg(&v.values)?;
        // ∂L/∂v_i = -(p_i - 1[i = label]) per query, then averaged.
        let dv: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, pi)| -(pi - f64::from(u8::from(i == label))) * scale)
            .collect();
        d_o_grad += dv[0];
        let mut gx = vec![0.0; dim];
        for class in centroids.present() {
            let c = centroids.get(class).expect("present");
            let g = state.metric.grad_wrt_x(x, c);
            let coeff = dv[class + 1];
            for j in 0..dim {
                gx[j] += coeff * g[j];
                class_grad[class][j] -= coeff * g[j];
            }
        }
        query_grads.push(gx);
    }

    let mut counts = vec![0usize; k];
    for &(_, class) in support {
        counts[class] += 1;
    }
    let support_grads = support
        .iter()
        .map(|&(_, class)| {
            let n = counts[class] as f64;
            class_grad[class].iter().map(|g| g / n).collect()
        })
        .collect();

    Ok(EmbeddingGradients {
        loss,
        d_o: d_o_grad,
        query: query_grads,
        support: support_grads,
        centroids,
    })
}

/// Loss and gradients of an episode with respect to every trainable
/// quantity.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    pub loss_value: f64,
    pub d_o_gradient: f64,
    /// Aligned with the encoder's parameter vector; empty for frozen
    /// encoders.
    pub parameter_gradients: Vec<f64>,
    /// ∂loss/∂f(q) for each query token.
    pub input_gradients: Vec<Vec<f64>>,
    /// Centroids computed from the episode's support set.
    pub batch_centroids: Centroids,
}

/// Support and query tokens with their label indices (0 = O, k + 1 = class k).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelledTokens {
    pub support: Vec<(TokenRef, usize)>,
    pub query: Vec<(TokenRef, usize)>,
}

/// Encodes an episode, evaluates [`episode_loss`] and backpropagates into
/// the encoder. Support elements labelled O are ignored: O has no centroid.
pub fn proto_loss<E: Encoder + ?Sized>(
    dataset: &Dataset,
    episode: &LabelledTokens,
    state: &PrototypeState,
    encoder: &E,
) -> Result<GradientBundle, ProtoError> {
    let support_refs: Vec<(TokenRef, usize)> = episode
        .support
        .iter()
        .filter(|(_, l)| *l > 0)
        .map(|&(r, l)| (r, l - 1))
        .collect();
    let support_vecs = support_refs
        .iter()
        .map(|(r, _)| encoder.encode(dataset, *r))
        .collect::<Result<Vec<_>, _>>()?;
    let query_vecs = episode
        .query
        .iter()
        .map(|(r, _)| encoder.encode(dataset, *r))
        .collect::<Result<Vec<_>, _>>()?;
    let support: Vec<(&[f64], usize)> = support_vecs
        .iter()
        .zip(&support_refs)
        .map(|(v, (_, c))| (v.as_slice(), *c))
        .collect();
    let queries: Vec<(&[f64], usize)> = query_vecs
        .iter()
        .zip(&episode.query)
        .map(|(v, (_, l))| (v.as_slice(), *l))
        .collect();
    let grads = episode_loss(&support, &queries, state)?;

    let mut params = Vec::new();
    if encoder.mode() == EncoderMode::Trainable {
        params = vec![0.0; encoder.params().len()];
        for ((r, _), g) in support_refs.iter().zip(&grads.support) {
            encoder.accumulate_grad(dataset, *r, g, &mut params)?;
        }
        for ((r, _), g) in episode.query.iter().zip(&grads.query) {
            encoder.accumulate_grad(dataset, *r, g, &mut params)?;
        }
    }
    Ok(GradientBundle {
        loss_value: grads.loss,
        d_o_gradient: grads.d_o,
        parameter_gradients: params,
        input_gradients: grads.query,
        batch_centroids: grads.centroids,
    })
}
