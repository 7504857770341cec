//! Parameters, the Adam optimizer, and the cosine learning-rate schedule.

use super::{GradTape, Gradients, Tensor};
use crate::error::{Error, Result};

/// Adam momentum term; the single momentum figure used by every stage.
pub const ADAM_BETA1: f32 = 0.937;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// A named trainable tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Parameter { name: name.into(), value, grad, frozen: false }
    }

    /// Registers this parameter on a tape for a training step. Frozen
    /// parameters come back untracked, so no op involving only them records
    /// anything and they can accumulate no gradient.
    pub fn bind(&self, tape: &mut GradTape) -> Tensor {
        if self.frozen {
            self.value.clone()
        } else {
            tape.leaf(&self.value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Copies gradients out of a backward result into the matching parameters.
/// `bound` must be the tensors returned by [`Parameter::bind`] in the same
/// order. Unused leaves receive exact zeros.
pub fn absorb_grads(params: &mut [Parameter], bound: &[Tensor], grads: &mut Gradients) {
    assert_eq!(params.len(), bound.len());
    for (p, t) in params.iter_mut().zip(bound) {
        if p.frozen {
            continue;
        }
        p.grad = grads.take_or_zeros(t);
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

/// Bias-corrected Adam over a parameter list. State is positional: the
/// parameter slice must keep a stable order across steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Parameter]) -> Self {
        let states = params
            .iter()
            .map(|p| AdamState { m: vec![0.0; p.value.len()], v: vec![0.0; p.value.len()], t: 0 })
            .collect();
        Adam { beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS, states }
    }

    /// One update from each parameter's accumulated gradient. Frozen
    /// parameters are skipped entirely (values and moments untouched).
    pub fn step(&mut self, params: &mut [Parameter], lr: f32) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::Contract(format!("adam step needs lr > 0, got {lr}")));
        }
        if params.len() != self.states.len() {
            return Err(Error::Contract(format!(
                "adam state holds {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            if p.frozen {
                continue;
            }
            s.t += 1;
            let bc1 = 1.0 - (self.beta1 as f64).powi(s.t as i32);
            let bc2 = 1.0 - (self.beta2 as f64).powi(s.t as i32);
            let Parameter { value, grad, .. } = p;
            let data = value.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
                s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = s.m[i] as f64 / bc1;
                let v_hat = s.v[i] as f64 / bc2;
                data[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at epoch 0 to 0 at `total_epochs`, no warmup.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Contract("cosine_lr requires total_epochs >= 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Contract(format!(
            "cosine_lr epoch {epoch} out of range 0..={total_epochs}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: &[f32]) -> Parameter {
        Parameter::new("p", Tensor::new(&[vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // Bias correction makes the first update ~lr * sign(g).
        let mut p = param(&[0.0]);
        p.grad = vec![1.0];
        let mut opt = Adam::new(std::slice::from_ref(&p));
        opt.step(std::slice::from_mut(&mut p), 1e-3).unwrap();
        let got = p.value.data()[0];
        assert!((got + 1e-3).abs() < 1e-8, "theta after one step: {got}");
    }

    #[test]
    fn zero_grad_leaves_value_unchanged() {
        let mut p = param(&[0.5, -0.25]);
        let mut opt = Adam::new(std::slice::from_ref(&p));
        opt.step(std::slice::from_mut(&mut p), 1e-3).unwrap();
        assert_eq!(p.value.data(), &[0.5, -0.25]);
    }

    #[test]
    fn frozen_param_never_moves() {
        let mut p = param(&[1.0, 2.0]);
        p.frozen = true;
        p.grad = vec![5.0, -3.0];
        let mut opt = Adam::new(std::slice::from_ref(&p));
        for _ in 0..10 {
            opt.step(std::slice::from_mut(&mut p), 0.1).unwrap();
        }
        assert_eq!(p.value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_beta1_is_the_momentum_setting() {
        let p = param(&[0.0]);
        let opt = Adam::new(std::slice::from_ref(&p));
        assert_eq!(opt.beta1, 0.937);
        assert_eq!(opt.beta2, 0.999);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 30, 1e-3).unwrap(), 1e-3);
        assert!(cosine_lr(30, 30, 1e-3).unwrap().abs() < 1e-19);
        assert!((cosine_lr(15, 30, 1e-3).unwrap() - 5e-4).abs() < 1e-12);
        assert!(cosine_lr(31, 30, 1e-3).is_err());
        assert!(cosine_lr(0, 0, 1e-3).is_err());
    }
}
