//! AdamW with decoupled weight decay and a linear warmup schedule.
//!
//! Learning-rate math stays in `f64` regardless of the parameter scalar
//! type so the schedule reproduces its fixture values exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("parameter {name}: moment shape {moment} does not match parameter {param}")]
    MomentShapeMismatch {
        name: String,
        moment: usize,
        param: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup to `base_lr` over `warmup_steps`, constant afterwards.
pub fn lr_at(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        base_lr * (step as f64 / warmup_steps as f64)
    } else {
        base_lr
    }
}

#[derive(Debug, Clone, Default)]
struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
}

/// First/second moment slots keyed by parameter name, plus the global step
/// counter used for bias correction.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<S> {
    slots: BTreeMap<String, Moments<S>>,
    step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        Self {
            slots: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Moment tensors in name order for checkpointing.
    pub fn export(&self) -> Vec<(String, Vec<S>, Vec<S>)> {
        self.slots
            .iter()
            .map(|(k, mo)| (k.clone(), mo.m.clone(), mo.v.clone()))
            .collect()
    }

    pub fn import(step: u64, slots: Vec<(String, Vec<S>, Vec<S>)>) -> Self {
        Self {
            slots: slots
                .into_iter()
                .map(|(k, m, v)| (k, Moments { m, v }))
                .collect(),
            step,
        }
    }
}

/// One AdamW update over named parameters:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected,
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
///
/// Gradients are left in place; the training loop zeroes them after the
/// step.
pub fn adamw_step<S: Scalar>(
    params: &mut [(String, &mut Tensor<S>)],
    state: &mut OptimizerState<S>,
    hyper: &AdamWHyper,
    lr: f64,
) -> Result<(), OptimError> {
    let t = state.step + 1;
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bias1 = 1.0 - b1.powi(t as i32);
    let bias2 = 1.0 - b2.powi(t as i32);

    for (name, param) in params.iter_mut() {
        let n = param.numel();
        let grad: Vec<S> = param
            .grad()
            .ok_or_else(|| OptimError::MissingGrad(name.clone()))?
            .to_vec();
        let slot = state.slots.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        });
        if slot.m.len() != n {
            return Err(OptimError::MomentShapeMismatch {
                name: name.clone(),
                moment: slot.m.len(),
                param: n,
            });
        }
        let sb1 = S::from_f64c(b1);
        let sb2 = S::from_f64c(b2);
        let one_m_b1 = S::from_f64c(1.0 - b1);
        let one_m_b2 = S::from_f64c(1.0 - b2);
        let inv_bias1 = S::from_f64c(1.0 / bias1);
        let inv_bias2 = S::from_f64c(1.0 / bias2);
        let eps = S::from_f64c(hyper.epsilon);
        let lr_s = S::from_f64c(lr);
        let wd = S::from_f64c(hyper.weight_decay);

        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            slot.m[i] = sb1 * slot.m[i] + one_m_b1 * g;
            slot.v[i] = sb2 * slot.v[i] + one_m_b2 * g * g;
            let m_hat = slot.m[i] * inv_bias1;
            let v_hat = slot.v[i] * inv_bias2;
            let update = m_hat / (v_hat.sqrt() + eps) + wd * data[i];
            data[i] = data[i] - lr_s * update;
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_fixture_values() {
        assert_eq!(lr_at(0, 100, 5e-5), 0.0);
        assert_eq!(lr_at(50, 100, 5e-5), 2.5e-5);
        assert_eq!(lr_at(100, 100, 5e-5), 5e-5);
        assert_eq!(lr_at(100_000, 100, 5e-5), 5e-5);
        // degenerate warmup of zero steps starts at base
        assert_eq!(lr_at(0, 0, 5e-5), 5e-5);
    }

    #[test]
    fn first_step_hand_computation() {
        // theta=1, g=1, lr=5e-5, wd=0.01:
        // m_hat = 1, v_hat = 1 -> theta' = 1 - 5e-5 * (1/(1+1e-8) + 0.01)
        let mut theta = Tensor::<f64>::filled(vec![1], 1.0);
        theta.set_requires_grad(true);
        theta.accumulate_grad(&[1.0]);
        let mut state = OptimizerState::new();
        let hyper = AdamWHyper::default();
        let mut params = vec![("theta".to_string(), &mut theta)];
        adamw_step(&mut params, &mut state, &hyper, 5e-5).unwrap();
        let expected = 1.0 - 5e-5 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((theta.item() - expected).abs() < 1e-12);
        assert!((theta.item() - 0.9999495).abs() < 1e-7);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_a_fixed_point() {
        let mut theta = Tensor::<f32>::filled(vec![3], 0.75);
        theta.set_requires_grad(true);
        theta.accumulate_grad(&[0.0, 0.0, 0.0]);
        let mut state = OptimizerState::new();
        let hyper = AdamWHyper {
            weight_decay: 0.0,
            ..AdamWHyper::default()
        };
        for _ in 0..5 {
            let mut params = vec![("theta".to_string(), &mut theta)];
            adamw_step(&mut params, &mut state, &hyper, 1e-3).unwrap();
        }
        assert_eq!(theta.data(), &[0.75, 0.75, 0.75]);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut theta = Tensor::<f32>::filled(vec![1], 1.0);
        theta.set_requires_grad(true);
        let mut state = OptimizerState::new();
        let mut params = vec![("theta".to_string(), &mut theta)];
        let err = adamw_step(&mut params, &mut state, &AdamWHyper::default(), 1e-3).unwrap_err();
        assert!(matches!(err, OptimError::MissingGrad(name) if name == "theta"));
    }

    /// Independent reference implementation of the update rule, written
    /// against the textbook recursion rather than the production loop.
    struct ReferenceAdam {
        m: f64,
        v: f64,
        t: u32,
    }

    impl ReferenceAdam {
        fn update(&mut self, theta: f64, g: f64, lr: f64, hyper: &AdamWHyper) -> f64 {
            self.t += 1;
            self.m = hyper.beta1 * self.m + (1.0 - hyper.beta1) * g;
            self.v = hyper.beta2 * self.v + (1.0 - hyper.beta2) * g * g;
            let m_hat = self.m / (1.0 - hyper.beta1.powi(self.t as i32));
            let v_hat = self.v / (1.0 - hyper.beta2.powi(self.t as i32));
            theta - lr * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * theta)
        }
    }

    #[test]
    fn matches_reference_adam_when_decay_is_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let hyper = AdamWHyper {
            weight_decay: 0.0,
            ..AdamWHyper::default()
        };
        let mut theta = Tensor::<f64>::filled(vec![1], 0.5);
        theta.set_requires_grad(true);
        let mut state = OptimizerState::new();
        let mut reference = ReferenceAdam { m: 0.0, v: 0.0, t: 0 };
        let mut ref_theta = 0.5;
        for _ in 0..10 {
            let g: f64 = rng.gen_range(-2.0..2.0);
            theta.zero_grad();
            theta.accumulate_grad(&[g]);
            let mut params = vec![("theta".to_string(), &mut theta)];
            adamw_step(&mut params, &mut state, &hyper, 1e-2).unwrap();
            ref_theta = reference.update(ref_theta, g, 1e-2, &hyper);
            assert!((theta.item() - ref_theta).abs() < 1e-7);
        }
    }
}
