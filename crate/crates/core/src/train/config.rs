//! Training configuration, read from a flat TOML document.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::proto::{Metric, DEFAULT_MISSING_DISTANCE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Proto,
    Baseline,
}

/// Which centroids the prototypical head uses at epoch-end inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Centroids recomputed over the whole training set.
    #[default]
    Exact,
    /// The exponentially decayed per-step centroids.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Derived from the corpus size when absent.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub head: HeadKind,
    /// Support size per minority class.
    pub s1: usize,
    /// Support size per non-minority entity class.
    pub s2: usize,
    /// Minority query tokens per non-minority query token.
    pub n: f64,
    /// Running-centroid decay.
    pub alpha: f64,
    pub metric: Metric,
    /// Output dimension M of the built-in encoder and of the linear layer
    /// over precomputed embeddings.
    #[serde(alias = "M")]
    pub dim: usize,
    /// Train a linear layer on top of precomputed embeddings.
    pub project_embeddings: bool,
    pub minority_classes: Vec<String>,
    /// Query tokens per episode.
    pub query_size: usize,
    /// Tokens per baseline batch.
    pub batch_size: usize,
    pub d_o_init: f64,
    pub missing_distance: f64,
    pub inference: InferenceMode,
    pub lookup_dim: usize,
    pub buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
            head: HeadKind::Proto,
            s1: 8,
            s2: 8,
            n: 1.0,
            alpha: 0.1,
            metric: Metric::Euclidean,
            dim: 64,
            project_embeddings: true,
            minority_classes: Vec::new(),
            query_size: 32,
            batch_size: 32,
            d_o_init: 1.0,
            missing_distance: DEFAULT_MISSING_DISTANCE,
            inference: InferenceMode::Exact,
            lookup_dim: 16,
            buckets: 1 << 16,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be a non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1)");
        }
        if !(self.n >= 0.0 && self.n.is_finite()) {
            return fail("n must be a non-negative number");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail("alpha must lie in (0, 1]");
        }
        if !(self.missing_distance > 0.0 && self.missing_distance.is_finite()) {
            return fail("missing_distance must be positive");
        }
        if !self.d_o_init.is_finite() {
            return fail("d_o_init must be finite");
        }
        if self.steps_per_epoch == Some(0) {
            return fail("steps_per_epoch must be positive");
        }
        for (name, v) in [
            ("s1", self.s1),
            ("s2", self.s2),
            ("dim", self.dim),
            ("query_size", self.query_size),
            ("batch_size", self.batch_size),
            ("lookup_dim", self.lookup_dim),
            ("buckets", self.buckets),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
