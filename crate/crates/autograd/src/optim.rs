//! Adam with bias correction and an optional AMSGrad switch.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: false,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        Self {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            v_max: vec![0.0; numel],
        }
    }
}

/// One Adam update of `param` at step `t` (1-based).
pub fn adam_step<T: Scalar>(
    cfg: &AdamConfig,
    t: u64,
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState,
) -> Result<()> {
    check_step(t, name, param, grad, state)?;
    apply(cfg, t, param, grad, state);
    Ok(())
}

fn check_step<T: Scalar>(t: u64, name: &str, param: &Tensor<T>, grad: &Tensor<T>, state: &AdamState) -> Result<()> {
    if t == 0 {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            message: "step counter starts at 1".into(),
        });
    }
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(shape_err("adam_step", format!("{name} {:?}", param.shape()), grad.shape()));
    }
    if !grad.is_finite() {
        return Err(TensorError::NonFiniteGradient(name.to_string()));
    }
    Ok(())
}

fn apply<T: Scalar>(cfg: &AdamConfig, t: u64, param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g.as_f64();
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let v_eff = if cfg.amsgrad {
            state.v_max[i] = state.v_max[i].max(v);
            state.v_max[i]
        } else {
            v
        };
        let m_hat = m / bc1;
        let v_hat = v_eff / bc2;
        *p = T::from_f64_lossy(p.as_f64() - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
}

/// Adam over a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, numels: impl IntoIterator<Item = usize>) -> Self {
        Self {
            cfg,
            t: 0,
            states: numels.into_iter().map(AdamState::new).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter, or none of them if any gradient is
    /// malformed or non-finite.
    pub fn step<T: Scalar>(&mut self, params: &mut [(&str, &mut Tensor<T>)], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                message: format!(
                    "optimizer tracks {} tensors, got {} params / {} grads",
                    self.states.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        let t = self.t + 1;
        for ((name, p), (g, s)) in params.iter().zip(grads.iter().zip(&self.states)) {
            check_step(t, name, p, g, s)?;
        }
        for ((_, p), (g, s)) in params.iter_mut().zip(grads.iter().zip(self.states.iter_mut())) {
            apply(&self.cfg, t, p, g, s);
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut s = AdamState::new(1);
        adam_step(&cfg, 1, "w", &mut p, &g, &mut s).unwrap();
        // m̂ = v̂ = 1 on the first step
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f32>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(3);
        adam_step(&cfg, 1, "w", &mut p, &Tensor::zeros(&[3]), &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_tensors_get_identical_updates() {
        let mut a = Tensor::<f32>::new(vec![2], vec![0.3, 0.7]).unwrap();
        let mut b = a.clone();
        let g = Tensor::new(vec![2], vec![0.2, -0.4]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), [2, 2]);
        for _ in 0..5 {
            opt.step(&mut [("a", &mut a), ("b", &mut b)], &[g.clone(), g.clone()]).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_updates_nothing() {
        let mut a = Tensor::<f32>::scalar(1.0);
        let mut b = Tensor::<f32>::scalar(1.0);
        let mut opt = Adam::new(AdamConfig::default(), [1, 1]);
        let err = opt
            .step(
                &mut [("conv1.kernel", &mut a), ("conv1.bias", &mut b)],
                &[Tensor::scalar(1.0), Tensor::scalar(f32::NAN)],
            )
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("conv1.bias".into()));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn amsgrad_keeps_largest_second_moment() {
        let cfg = AdamConfig {
            amsgrad: true,
            ..AdamConfig::default()
        };
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut s = AdamState::new(1);
        adam_step(&cfg, 1, "w", &mut p, &Tensor::scalar(10.0), &mut s).unwrap();
        adam_step(&cfg, 2, "w", &mut p, &Tensor::scalar(0.1), &mut s).unwrap();
        assert!(s.v_max[0] >= s.v[0]);
        assert!((s.v_max[0] - 0.1).abs() < 1e-12);
    }
}
