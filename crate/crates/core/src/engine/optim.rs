use serde::{Deserialize, Serialize};

use super::{EngineError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub l2: f64,
    /// Rescale all gradients so their global norm is at most this.
    pub clip_norm: Option<f64>,
    /// Clamp every gradient element to `[-v, v]`.
    pub clip_value: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2: 0.0,
            clip_norm: None,
            clip_value: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate, ..Default::default() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate, ..Default::default() }
    }
}

/// Stateful optimizer over one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self, EngineError> {
        if !(cfg.learning_rate > 0.0) {
            return Err(EngineError::Config(format!("learning rate must be positive, got {}", cfg.learning_rate)));
        }
        Ok(Optimizer { cfg, steps: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// Clips, applies the update with L2, then zeroes gradients. Fails with
    /// [`EngineError::Divergence`] if any parameter becomes non-finite.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), EngineError> {
        if let Some(max_norm) = self.cfg.clip_norm {
            let norm = params.grad_norm();
            if norm > max_norm {
                let s = max_norm / norm;
                params.iter_mut().for_each(|p| p.grad.data_mut().iter_mut().for_each(|g| *g *= s));
            }
        }
        if let Some(c) = self.cfg.clip_value {
            params.iter_mut().for_each(|p| p.grad.data_mut().iter_mut().for_each(|g| *g = g.clamp(-c, c)));
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let cfg = &self.cfg;
        let t = self.steps as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let (w, g) = (p.value.data_mut(), p.grad.data());
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= cfg.learning_rate * (g + cfg.l2 * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    let bc1 = 1.0 - cfg.beta1.powi(t);
                    let bc2 = 1.0 - cfg.beta2.powi(t);
                    for j in 0..w.len() {
                        let g = g[j] + cfg.l2 * w[j];
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        w[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        params.zero_grad();
        if let Some(name) = params.first_non_finite() {
            return Err(EngineError::Divergence(format!("parameter `{name}` is non-finite after update")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(w));
        ps.get_mut(id).grad = Tensor::scalar(g);
        ps
    }

    #[test]
    fn sgd_one_step() {
        let mut ps = single(1.0, 1.0);
        Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap().step(&mut ps).unwrap();
        assert!((ps.by_name("w").unwrap().value.item() - 0.9).abs() < 1e-15);
        assert_eq!(ps.by_name("w").unwrap().grad.item(), 0.0);
    }

    #[test]
    fn clip_value_applies_first() {
        let mut ps = single(1.0, 1.0);
        let cfg = OptimizerConfig { clip_value: Some(0.075), ..OptimizerConfig::sgd(1.0) };
        Optimizer::new(cfg).unwrap().step(&mut ps).unwrap();
        assert!((ps.by_name("w").unwrap().value.item() - (1.0 - 0.075)).abs() < 1e-15);
    }

    #[test]
    fn clip_norm_rescales() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::vector(vec![0.0, 0.0]));
        ps.get_mut(id).grad = Tensor::vector(vec![3.0, 4.0]);
        let cfg = OptimizerConfig { clip_norm: Some(1.0), ..OptimizerConfig::sgd(1.0) };
        Optimizer::new(cfg).unwrap().step(&mut ps).unwrap();
        let w = ps.get(id).value.data().to_vec();
        assert!((w[0] + 0.6).abs() < 1e-15 && (w[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // First Adam iteration: m̂ = g, v̂ = g², so Δw = -lr * g / (|g| + eps).
        let (lr, eps, g) = (0.01, 1e-8, 1.0);
        let mut ps = single(0.5, g);
        let cfg = OptimizerConfig { epsilon: eps, ..OptimizerConfig::adam(lr) };
        Optimizer::new(cfg).unwrap().step(&mut ps).unwrap();
        let expected = 0.5 - lr * g / (g.abs() + eps);
        assert!((ps.by_name("w").unwrap().value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn divergence_reported() {
        let mut ps = single(1.0, f64::INFINITY);
        let err = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap().step(&mut ps).unwrap_err();
        assert!(matches!(err, EngineError::Divergence(_)));
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0)).is_err());
    }
}
