//! AdamW with decoupled weight decay and linear warmup.

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_ADAM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First/second moments per trainable tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    entries: Vec<(String, Moments)>,
}

impl OptimState {
    pub fn new() -> Self {
        OptimState::default()
    }

    fn moments_mut(&mut self, name: &str, len: usize) -> &mut Moments {
        if let Some(idx) = self.entries.iter().position(|(n, _)| n == name) {
            return &mut self.entries[idx].1;
        }
        self.entries.push((
            name.to_string(),
            Moments {
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        ));
        &mut self.entries.last_mut().unwrap().1
    }

    pub fn entries(&self) -> &[(String, Moments)] {
        &self.entries
    }

    pub fn insert(&mut self, name: String, moments: Moments) {
        self.entries.push((name, moments));
    }
}

/// Linear warmup to the configured rate: learning_rate · min(1, step/warmup),
/// constant afterwards. `step` counts optimizer updates.
pub fn lr_at(step: u64, learning_rate: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return learning_rate;
    }
    learning_rate * (step as f64 / warmup_steps as f64).min(1.0)
}

/// One AdamW update over named parameters:
/// m ← β₁m+(1−β₁)g, v ← β₂v+(1−β₂)g², bias-corrected, then
/// θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ (decay decoupled, applied to pre-update θ).
///
/// Every parameter must hold a populated gradient.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::contract(format!("parameter {name} has no gradient")))?
            .to_vec();
        let moments = state.moments_mut(name, grad.len());
        if moments.m.len() != grad.len() {
            return Err(Error::contract(format!(
                "optimizer state for {name} has {} entries, parameter has {}",
                moments.m.len(),
                grad.len()
            )));
        }
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            moments.m[i] = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
            moments.v[i] = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            let theta = data[i];
            data[i] = theta - lr * m_hat / (v_hat.sqrt() + EPS_ADAM) - lr * weight_decay * theta;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_hand_points() {
        assert_eq!(lr_at(0, 5e-5, 100), 0.0);
        assert_eq!(lr_at(100, 5e-5, 100), 5e-5);
        assert_eq!(lr_at(50, 5e-5, 100), 2.5e-5);
        assert_eq!(lr_at(1000, 5e-5, 100), 5e-5);
        assert_eq!(lr_at(0, 5e-5, 0), 5e-5);
    }

    #[test]
    fn lr_is_monotone_through_warmup_then_flat() {
        let mut prev = -1.0;
        for step in 0..=100 {
            let lr = lr_at(step, 5e-5, 100);
            assert!(lr >= prev);
            prev = lr;
        }
        assert_eq!(lr_at(101, 5e-5, 100), lr_at(100, 5e-5, 100));
    }

    fn tensor_with_grad(data: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::from_vec(data).with_requires_grad(true);
        t.accumulate_grad(&grad);
        t
    }

    #[test]
    fn zero_grad_zero_decay_leaves_parameters_unchanged() {
        let mut t = tensor_with_grad(vec![1.5, -2.0], vec![0.0, 0.0]);
        let mut state = OptimState::new();
        adamw_step(&mut [("p".into(), &mut t)], &mut state, 0.1, 0.0).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_hand_recurrence() {
        // θ=1, g=0.5, lr=0.1, wd=0: m=0.05, v=2.5e-4, m̂=0.5, v̂=0.25,
        // θ → 1 − 0.1·0.5/(0.5+1e-8) ≈ 0.9
        let mut t = tensor_with_grad(vec![1.0], vec![0.5]);
        let mut state = OptimState::new();
        adamw_step(&mut [("p".into(), &mut t)], &mut state, 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 * 0.5 / (0.25f64.sqrt() + EPS_ADAM);
        assert!((t.data()[0] - expected).abs() < 1e-15);
        assert!((t.data()[0] - 0.9).abs() < 1e-7);
        assert!((state.entries()[0].1.m[0] - 0.05).abs() < 1e-15);
        assert!((state.entries()[0].1.v[0] - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_hand_case() {
        // θ=1, g=0, lr=5e-5, wd=0.01 ⇒ θ = 1 − 5e-7
        let mut t = tensor_with_grad(vec![1.0], vec![0.0]);
        let mut state = OptimState::new();
        adamw_step(&mut [("p".into(), &mut t)], &mut state, 5e-5, 0.01).unwrap();
        assert!((t.data()[0] - (1.0 - 5e-7)).abs() < 1e-18);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let mut t = Tensor::from_vec(vec![1.0]).with_requires_grad(true);
        let mut state = OptimState::new();
        let err = adamw_step(&mut [("lora.layer0.query.a".into(), &mut t)], &mut state, 0.1, 0.0)
            .unwrap_err();
        assert!(err.to_string().contains("lora.layer0.query.a"));
    }
}
