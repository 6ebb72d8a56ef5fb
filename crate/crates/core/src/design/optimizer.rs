//! Adam with global-norm gradient clipping and a reduce-on-plateau learning
//! rate rule.

use std::collections::VecDeque;

use crate::ad::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold applied to the whole gradient group.
    pub clip: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: None }
    }

    pub fn with_beta2(mut self, beta2: f64) -> Self {
        self.beta2 = beta2;
        self
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }
}

/// Adam state for one parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[Tensor]) -> Self {
        Adam {
            config,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Clip the gradient group, advance moments, update parameters in place.
    /// Returns the pre-clip global norm.
    pub fn step(&mut self, params: &mut [Tensor], grads: &mut [Tensor]) -> f64 {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group mismatch");
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different group");
        let norm = global_norm(grads);
        assert!(norm.is_finite(), "non-finite gradient norm");
        if let Some(clip) = self.config.clip {
            if norm > clip {
                let s = clip / norm;
                for g in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
        self.t += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.config.lr * mhat / (vhat.sqrt() + self.config.eps);
            }
        }
        norm
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Multiplies the learning rate by `factor` whenever the smoothed loss has
/// not improved for `patience` steps, never below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub window: usize,
    history: VecDeque<f64>,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64, window: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            min_lr,
            window,
            history: VecDeque::new(),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feed one loss; returns the new learning rate if a reduction fired.
    pub fn observe(&mut self, loss: f64, current_lr: f64) -> Option<f64> {
        self.history.push_back(loss);
        if self.history.len() > self.window {
            self.history.pop_front();
        }
        if self.history.len() < self.window {
            return None;
        }
        let smoothed = self.history.iter().sum::<f64>() / self.history.len() as f64;
        if smoothed < self.best - 1e-12 {
            self.best = smoothed;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience && current_lr > self.min_lr {
            self.stale = 0;
            let lr = (current_lr * self.factor).max(self.min_lr);
            return Some(lr);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_scales_to_threshold() {
        let mut grads = vec![Tensor::vector(vec![30.0, 40.0])]; // norm 50
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut adam = Adam::new(AdamConfig::new(0.0).with_clip(Some(5.0)), &params);
        let norm = adam.step(&mut params, &mut grads);
        assert!((norm - 50.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // Bias-corrected first step: delta = -lr * g / (|g| + eps),
        // i.e. -lr * sign(g) whenever |g| dwarfs eps.
        let mut params = vec![Tensor::vector(vec![1.0, 1.0])];
        let mut grads = vec![Tensor::vector(vec![3.7, -0.45])];
        let mut adam = Adam::new(AdamConfig::new(0.01), &params);
        adam.step(&mut params, &mut grads);
        assert!((params[0].data()[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((params[0].data()[1] - (1.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = vec![Tensor::vector(vec![2.5, -1.5])];
        let mut grads = vec![Tensor::zeros(&[2])];
        let mut adam = Adam::new(AdamConfig::new(0.1), &params);
        adam.step(&mut params, &mut grads);
        assert_eq!(params[0].data(), &[2.5, -1.5]);
    }

    #[test]
    fn plateau_reduces_after_patience_and_floors() {
        let mut sched = PlateauScheduler::new(0.8, 5, 1e-4, 3);
        let mut lr = 1e-3;
        let mut reductions = 0;
        // Constant loss: never improves once the window fills.
        for _ in 0..60 {
            if let Some(new_lr) = sched.observe(1.0, lr) {
                lr = new_lr;
                reductions += 1;
            }
        }
        assert!(reductions >= 2, "expected repeated reductions, got {reductions}");
        assert!(lr >= 1e-4);
        for _ in 0..200 {
            if let Some(new_lr) = sched.observe(1.0, lr) {
                lr = new_lr;
            }
        }
        assert!((lr - 1e-4).abs() < 1e-12, "lr should floor at min_lr, got {lr}");
    }

    #[test]
    fn improving_loss_does_not_reduce() {
        let mut sched = PlateauScheduler::new(0.8, 5, 1e-4, 3);
        let mut loss = 10.0;
        for _ in 0..100 {
            assert!(sched.observe(loss, 1e-3).is_none());
            loss *= 0.99;
        }
    }
}
