use crate::harness::config::OptimizerConfig;
use crate::harness::params::ParamStore;

/// Linear warm-up over the first `warmup_fraction` of steps, then linear
/// decay towards zero.
pub fn learning_rate(cfg: &OptimizerConfig, step: usize) -> f64 {
    let warmup = (cfg.warmup_fraction * cfg.steps as f64).ceil() as usize;
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let remaining = cfg.steps.saturating_sub(warmup);
    if remaining == 0 {
        return cfg.learning_rate;
    }
    let left = cfg.steps.saturating_sub(step).max(1);
    cfg.learning_rate * left as f64 / remaining as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    updates: i32,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.tensor.numel()])
            .collect();
        Self {
            cfg: cfg.clone(),
            first: zeros.clone(),
            second: zeros,
            updates: 0,
        }
    }

    /// Applies one update. `grads[i]` belongs to the i-th registered tensor.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], step: usize) {
        let lr = learning_rate(&self.cfg, step);
        let clip = match self.cfg.grad_clip {
            Some(limit) => {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.updates += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.updates);
        let c2 = 1.0 - b2.powi(self.updates);
        for (i, tensor) in params.tensors_mut().enumerate() {
            let data = tensor.data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..data.len() {
                let g = grads[i][j] * clip;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                data[j] -= lr * (update + self.cfg.weight_decay * data[j]);
            }
        }
    }
}
