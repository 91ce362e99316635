use alloc::vec::Vec;

use super::{ParamStore, TensorError};

/// Adam with coupled L2 weight decay and joint gradient-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.001, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Joint L2 norm of the raw gradients.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_joint_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

/// One optimizer step over every parameter of `store`.
///
/// Order: gradient negation when maximizing, joint-norm clipping, weight
/// decay `λ·θ` added to the gradient, then the bias-corrected Adam update.
/// A non-finite gradient rejects the whole step and leaves `store` untouched.
pub fn adam_step(
    store: &mut ParamStore,
    mut grads: Vec<Vec<f64>>,
    cfg: &OptimizerConfig,
    maximize: bool,
) -> Result<StepStats, TensorError> {
    if grads.len() != store.len() {
        return Err(super::shape_err(alloc::format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (p, g) in store.iter().zip(&grads) {
        if g.len() != p.tensor.len() {
            return Err(super::shape_err(alloc::format!(
                "gradient for `{}` has {} values, parameter has {}",
                p.name,
                g.len(),
                p.tensor.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(p.name.clone()));
        }
    }
    if maximize {
        grads.iter_mut().flatten().for_each(|v| *v = -*v);
    }
    let grad_norm = clip_joint_norm(&mut grads, cfg.clip_norm);
    let clipped = grad_norm > cfg.clip_norm;

    for (p, g) in store.iter_mut().zip(grads) {
        p.step_count += 1;
        let t = p.step_count as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        let theta = p.tensor.data_mut();
        for i in 0..theta.len() {
            let gi = g[i] + cfg.weight_decay * theta[i];
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * gi;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            theta[i] -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(StepStats { grad_norm, clipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        adam_step(&mut s, vec![vec![0.0]], &cfg, false).unwrap();
        assert_eq!(s.iter().next().unwrap().tensor.item(), 0.7);
        assert_eq!(s.iter().next().unwrap().step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let cfg = OptimizerConfig { learning_rate: 0.001, weight_decay: 0.0, ..OptimizerConfig::default() };
        adam_step(&mut s, vec![vec![1.0]], &cfg, false).unwrap();
        // m̂ = v̂ = 1 on the first step, so Δθ = −α/(1 + ε).
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.iter().next().unwrap().tensor.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_unit_norm() {
        let mut g = vec![vec![6.0, 0.0], vec![8.0]];
        let before = clip_joint_norm(&mut g, 1.0);
        assert_eq!(before, 10.0);
        let after = libm::sqrt(g.iter().flatten().map(|v| v * v).sum::<f64>());
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maximize_matches_minimizing_the_negation() {
        let cfg = OptimizerConfig::default();
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        for g in [0.4, -2.0, 0.05] {
            adam_step(&mut a, vec![vec![g]], &cfg, true).unwrap();
            adam_step(&mut b, vec![vec![-g]], &cfg, false).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut s = scalar_store(1.0);
        let before = s.clone();
        let err = adam_step(&mut s, vec![vec![f64::NAN]], &OptimizerConfig::default(), false);
        assert!(matches!(err, Err(TensorError::NonFinite(_))));
        assert_eq!(s, before);
    }
}
