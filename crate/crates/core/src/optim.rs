//! AdamW with decoupled weight decay and a multi-step learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err(format!("AdamW betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return config_err("AdamW eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

/// Moment buffers and step counts for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamWConfig,
    pub lr: f64,
    pub steps: Vec<u64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamSet, hyper: AdamWConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            hyper,
            lr: 0.0,
            steps: vec![0; params.len()],
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && self.steps.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(t, (m, v))| m.len() == t.numel() && v.len() == t.numel());
        if !ok {
            return contract_err("optimizer state does not match the parameter shapes");
        }
        Ok(())
    }
}

/// One AdamW update at learning rate `lr` using each parameter's stored
/// gradient; parameters without a gradient are skipped.
pub fn adamw_step(params: &mut ParamSet, state: &mut OptimState, lr: f64) -> Result<()> {
    state.check(params)?;
    state.lr = lr;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    for (k, t) in params.tensors_mut().iter_mut().enumerate() {
        let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        state.steps[k] += 1;
        let step = state.steps[k] as i32;
        let bc1 = 1.0 - beta1.powi(step);
        let bc2 = 1.0 - beta2.powi(step);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            *p *= 1.0 - lr * weight_decay;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            milestones: vec![50, 150],
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return config_err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config_err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr0, &self.milestones, self.gamma)
    }
}

/// lr0·gamma^(number of milestones ≤ epoch). When 1/gamma is an integer the
/// power is applied as a division so decimal rates stay exact.
pub fn lr_at(epoch: usize, lr0: f64, milestones: &[usize], gamma: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    let inv = 1.0 / gamma;
    if (inv - inv.round()).abs() < 1e-12 {
        lr0 / inv.round().powi(k)
    } else {
        lr0 * gamma.powi(k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use fncgen_autodiff::Tensor;
    use proptest::prelude::*;

    fn scalar_set(p: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::scalar(p));
        ps.get_mut(id).accumulate_grad(&[g]).unwrap();
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut ps = scalar_set(0.7, 0.0);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&ps, hyper);
        for _ in 0..5 {
            adamw_step(&mut ps, &mut st, 0.1).unwrap();
        }
        assert_eq!(ps.tensors()[0].data(), &[0.7]);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut ps = scalar_set(1.0, 1.0);
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(&ps, hyper);
        adamw_step(&mut ps, &mut st, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((ps.tensors()[0].data()[0] - expected).abs() < 1e-15);
        assert!((ps.tensors()[0].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut ps = scalar_set(2.0, 0.0);
        let mut st = OptimState::new(&ps, AdamWConfig::default());
        let mut expected = 2.0;
        for _ in 0..3 {
            adamw_step(&mut ps, &mut st, 0.1).unwrap();
            expected -= 0.1 * 0.01 * expected;
        }
        assert!((ps.tensors()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::scalar(1.0));
        let mut st = OptimState::new(&ps, AdamWConfig::default());
        adamw_step(&mut ps, &mut st, 0.1).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[1.0]);
        assert_eq!(st.steps, [0]);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut ps = scalar_set(1.0, 1.0);
        let mut st = OptimState::new(&ParamSet::new(), AdamWConfig::default());
        assert!(adamw_step(&mut ps, &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 1e-4);
        assert_eq!(s.at(49), 1e-4);
        assert_eq!(s.at(50), 1e-5);
        assert_eq!(s.at(149), 1e-5);
        assert_eq!(s.at(150), 1e-6);
        assert_eq!(s.at(299), 1e-6);
        assert_eq!(lr_at(3, 1.0, &[1, 2], 0.3), 1.0 * 0.3f64.powi(2));
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule { milestones: vec![50, 50], ..LrSchedule::default() }.validate().is_err());
        assert!(LrSchedule { gamma: 0.0, ..LrSchedule::default() }.validate().is_err());
        assert!(LrSchedule { gamma: 1.5, ..LrSchedule::default() }.validate().is_err());
        LrSchedule::default().validate().unwrap();
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(epoch in 0usize..400, lr0 in 1e-6f64..1.0, gamma in 0.01f64..1.0) {
            let ms = [50, 150, 250];
            prop_assert!(lr_at(epoch + 1, lr0, &ms, gamma) <= lr_at(epoch, lr0, &ms, gamma));
        }
    }
}
