use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::param::ParamStore;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("{name} must lie in (0, 1), got {value}")]
    Beta { name: &'static str, value: f64 },
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
}

/// Adam with decoupled weight decay. `weight_decay == 0` is plain Adam.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Result<Self, OptimError> {
        let opt = AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        };
        opt.validate()?;
        Ok(opt)
    }

    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight decay 0.01.
    pub fn with_lr(lr: f64) -> Result<Self, OptimError> {
        Self::new(lr, 0.9, 0.999, 1e-8, 0.01)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail every check
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(OptimError::LearningRate(self.lr));
        }
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(OptimError::Beta { name, value });
            }
        }
        for (name, value) in [("eps", self.eps), ("weight_decay", self.weight_decay)] {
            if !(value >= 0.0) {
                return Err(OptimError::Negative { name, value });
            }
        }
        Ok(())
    }

    /// Applies one update to every non-frozen parameter, using the gradient
    /// currently held in each parameter's `grad`.
    pub fn step(&self, store: &mut ParamStore, zero_grad: bool) -> Result<(), OptimError> {
        self.validate()?;
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let value = p.value.data_mut();
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            for (((x, mi), vi), &g) in value.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(p.grad.data()) {
                let g = f64::from(g);
                let m_new = self.beta1 * f64::from(*mi) + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * f64::from(*vi) + (1.0 - self.beta2) * g * g;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let mut xv = f64::from(*x) * decay;
                xv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                *x = xv as f32;
            }
            if zero_grad {
                p.zero_grad();
            }
        }
        Ok(())
    }
}

/// Adam without weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self, OptimError> {
        let opt = Adam { lr, beta1, beta2, eps };
        opt.as_adamw().validate()?;
        Ok(opt)
    }

    pub fn with_lr(lr: f64) -> Result<Self, OptimError> {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn as_adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: 0.0,
        }
    }

    pub fn step(&self, store: &mut ParamStore, zero_grad: bool) -> Result<(), OptimError> {
        self.as_adamw().step(store, zero_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn single(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::full(&[1], value));
        s.get_mut(id).grad.data_mut()[0] = grad;
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(0.0, 1.0);
        AdamW::new(1e-3, 0.9, 0.999, 0.0, 0.0).unwrap().step(&mut s, false).unwrap();
        let x = s.iter().next().unwrap().value.data()[0];
        assert!((f64::from(x) + 1e-3).abs() < 1e-9, "{x}");
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let mut s = single(1.0, 0.0);
        AdamW::new(1e-3, 0.9, 0.999, 1e-8, 0.1).unwrap().step(&mut s, false).unwrap();
        let x = f64::from(s.iter().next().unwrap().value.data()[0]);
        assert!((1.0 - x - 1e-4).abs() < 1e-7, "{x}");
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut s = single(2.0, 1.0);
        Adam::new(0.01, 0.9, 0.999, 0.0).unwrap().step(&mut s, false).unwrap();
        let x = f64::from(s.iter().next().unwrap().value.data()[0]);
        assert!((x - 1.99).abs() < 1e-6);

        let mut z = single(2.0, 0.0);
        Adam::with_lr(0.01).unwrap().step(&mut z, false).unwrap();
        assert_eq!(z.iter().next().unwrap().value.data()[0], 2.0);
    }

    #[test]
    fn adam_matches_adamw_without_decay() {
        let mut a = single(0.3, -0.7);
        let mut b = a.clone();
        Adam::with_lr(1e-2).unwrap().step(&mut a, false).unwrap();
        AdamW::new(1e-2, 0.9, 0.999, 1e-8, 0.0).unwrap().step(&mut b, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamW::new(0.0, 0.9, 0.999, 1e-8, 0.0).is_err());
        assert!(AdamW::new(-1.0, 0.9, 0.999, 1e-8, 0.0).is_err());
        assert!(AdamW::new(1e-3, 1.0, 0.999, 1e-8, 0.0).is_err());
        assert!(AdamW::new(1e-3, 0.9, 0.0, 1e-8, 0.0).is_err());
        assert!(Adam::new(1e-3, 0.9, 1.5, 1e-8).is_err());
    }

    #[test]
    fn moments_zero_before_first_step() {
        let s = single(1.0, 1.0);
        let p = s.iter().next().unwrap();
        assert!(p.adam_m.data().iter().chain(p.adam_v.data()).all(|&v| v == 0.0));
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = single(1.0, 1.0);
        s.iter_mut().next().unwrap().frozen = true;
        AdamW::with_lr(0.1).unwrap().step(&mut s, true).unwrap();
        let p = s.iter().next().unwrap();
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn zero_grad_on_request() {
        let mut s = single(1.0, 1.0);
        AdamW::with_lr(0.1).unwrap().step(&mut s, false).unwrap();
        assert_eq!(s.iter().next().unwrap().grad.data()[0], 1.0);
        AdamW::with_lr(0.1).unwrap().step(&mut s, true).unwrap();
        assert_eq!(s.iter().next().unwrap().grad.data()[0], 0.0);
    }
}
