//! AdamW with decoupled weight decay and bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Adam denominator guard.
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: ADAM_EPS,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Per-parameter moment buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

/// One parameter handed to [`OptimizerState::step`].
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a [T],
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// Restores state saved by a checkpoint.
    pub fn restore(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments<T>>) -> Self {
        Self {
            config,
            step,
            moments,
        }
    }

    pub fn iter_moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Applies one update. Validates every gradient first; on a non-finite
    /// gradient nothing is modified.
    pub fn step(&mut self, params: &mut [ParamUpdate<'_, T>]) -> Result<()> {
        for p in params.iter() {
            if p.grad.len() != p.value.len() {
                return Err(Error::shape("adamw_step", p.value.shape(), &[p.grad.len()]));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = T::c(c.lr);
        let b1 = T::c(c.beta1);
        let b2 = T::c(c.beta2);
        let eps = T::c(c.eps);
        let decay = T::one() - T::c(c.lr * c.weight_decay);
        let bc1 = T::one() - T::c(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::c(c.beta2.powi(self.step as i32));
        for p in params.iter_mut() {
            let n = p.value.len();
            let mo = self.moments.entry(p.name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let w = p.value.data_mut();
            for i in 0..n {
                let g = p.grad[i];
                mo.m[i] = b1 * mo.m[i] + (T::one() - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (T::one() - b2) * g * g;
                let mh = mo.m[i] / bc1;
                let vh = mo.v[i] / bc2;
                w[i] = w[i] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut st = OptimizerState::<f64>::new(AdamWConfig::default());
        let mut w = Tensor::from_rows(&[&[1.5, -2.0]]);
        let before = w.clone();
        st.step(&mut [ParamUpdate {
            name: "w",
            value: &mut w,
            grad: &[0.0, 0.0],
        }])
        .unwrap();
        assert_eq!(w, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-3;
        let mut st = OptimizerState::<f64>::new(AdamWConfig {
            lr,
            ..Default::default()
        });
        let grads = [0.3, -7.0, 1e-2];
        let mut w = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]);
        st.step(&mut [ParamUpdate {
            name: "w",
            value: &mut w,
            grad: &grads,
        }])
        .unwrap();
        for (&d, &g) in w.data().iter().zip(&grads) {
            // |Δ| = lr·|g|/(|g|+eps)
            let want = -lr * g / (g.abs() + ADAM_EPS);
            assert!((d - want).abs() < 1e-15);
            assert!((d.abs() - lr).abs() < lr * 1e-5);
        }
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut st = OptimizerState::<f64>::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut w = Tensor::full(&[1], 1.0);
        let mut prev = 1.0;
        for _ in 0..10 {
            let g = [2.0 * w.data()[0]];
            st.step(&mut [ParamUpdate {
                name: "w",
                value: &mut w,
                grad: &g,
            }])
            .unwrap();
            let cur = w.data()[0];
            assert!(cur < prev && cur > -0.1, "{cur} after {prev}");
            prev = cur;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut st = OptimizerState::<f64>::new(AdamWConfig::default());
        let mut a = Tensor::full(&[1], 1.0);
        let mut b = Tensor::full(&[1], 1.0);
        let err = st
            .step(&mut [
                ParamUpdate {
                    name: "a",
                    value: &mut a,
                    grad: &[1.0],
                },
                ParamUpdate {
                    name: "bad",
                    value: &mut b,
                    grad: &[f64::NAN],
                },
            ])
            .unwrap_err();
        assert!(err.to_string().contains("bad"));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut st = OptimizerState::<f64>::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut w = Tensor::full(&[1], 2.0);
        st.step(&mut [ParamUpdate {
            name: "w",
            value: &mut w,
            grad: &[0.0],
        }])
        .unwrap();
        assert!((w.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
