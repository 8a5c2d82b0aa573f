//! Adaptive-moment optimizer with decoupled weight decay and a linear
//! warmup schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps of linear warmup; 0 disables warmup.
    pub warmup_steps: u64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_steps: 0,
        }
    }

    /// Warmup length ⌈fraction · total_steps⌉.
    pub fn with_warmup(mut self, fraction: f64, total_steps: u64) -> Self {
        self.warmup_steps = (fraction * total_steps as f64).ceil() as u64;
        self
    }

    /// Learning rate at 1-based step t: lr·t/W during warmup, lr after.
    pub fn learning_rate_at(&self, t: u64) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            self.learning_rate * t as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Optimizer state over one flat parameter space addressed by offsets.
///
/// Call [`AdamW::begin_step`] once per optimization step, then
/// [`AdamW::update`] for each parameter segment.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the step counter and returns the learning rate in effect.
    pub fn begin_step(&mut self) -> f64 {
        self.t += 1;
        self.config.learning_rate_at(self.t)
    }

    /// Updates `params`, stored at `offset` of the flat space, from `grads`.
    /// Weight decay is applied only when `decay` is set.
    pub fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], decay: bool) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length");
        assert!(self.t > 0, "begin_step must precede update");
        let c = self.config;
        let lr = c.learning_rate_at(self.t);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let wd = if decay { c.weight_decay } else { 0.0 };
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + c.epsilon) + wd * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_closed_form() {
        let c = AdamWConfig::new(1e-4, 0.01).with_warmup(0.1, 95);
        assert_eq!(c.warmup_steps, 10);
        for t in 1..=10 {
            assert_eq!(c.learning_rate_at(t), 1e-4 * t as f64 / 10.0);
        }
        for t in 11..=95 {
            assert_eq!(c.learning_rate_at(t), 1e-4);
        }
        assert_eq!(AdamWConfig::new(0.5, 0.0).learning_rate_at(1), 0.5);
    }

    #[test]
    fn zero_learning_rate_is_frozen() {
        let mut opt = AdamW::new(AdamWConfig::new(0.0, 0.01), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.begin_step();
        opt.update(0, &mut p, &[0.3, 0.1, -9.0], true);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_reference() {
        // first step: m̂ = g, v̂ = g², so the move is lr·(g/(|g|+ε) + wd·p)
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.5), 2);
        let mut p = vec![2.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[4.0, -0.25], true);
        let e0 = 2.0 - 0.1 * (4.0 / (4.0 + 1e-8) + 0.5 * 2.0);
        let e1 = -1.0 - 0.1 * (-0.25 / (0.25 + 1e-8) + 0.5 * -1.0);
        assert!((p[0] - e0).abs() < 1e-15 && (p[1] - e1).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig::new(0.05, 0.0), 2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.begin_step();
            opt.update(0, &mut p, &g, false);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-3), "{p:?}");
    }
}
