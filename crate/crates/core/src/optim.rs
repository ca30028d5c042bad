//! First-order optimizers over named parameter slices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate, ..Self::default() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate, ..Self::default() }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{key}.learning_rate"), "must be positive and finite"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{key}.{name}"), "must lie in [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config(format!("{key}.eps"), "must be positive"));
        }
        Ok(())
    }
}

/// A parameter as seen by one optimizer step.
pub struct ParamSlot<'a, T> {
    pub key: String,
    pub value: &'a mut [T],
    pub grad: Option<&'a [T]>,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    step_count: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step_count: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every non-frozen slot. Frozen slots are never
    /// written. Fails before touching anything if a trainable slot has no
    /// gradient.
    pub fn step(&mut self, params: &mut [ParamSlot<'_, T>]) -> Result<()> {
        for p in params.iter() {
            if p.frozen {
                continue;
            }
            match p.grad {
                None => return Err(Error::Contract(format!("trainable parameter `{}` has no gradient", p.key))),
                Some(g) if g.len() != p.value.len() => {
                    return Err(Error::shape("optimizer_step", format!("`{}`: gradient length mismatch", p.key)))
                }
                Some(_) => {}
            }
        }
        self.step_count += 1;
        let lr = T::lit(self.config.learning_rate);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut().filter(|p| !p.frozen) {
                    let g = p.grad.unwrap();
                    for (v, &gv) in p.value.iter_mut().zip(g) {
                        *v -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
                let eps = T::lit(self.config.eps);
                let t = self.step_count as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for p in params.iter_mut().filter(|p| !p.frozen) {
                    let g = p.grad.unwrap();
                    let (m, v) = self
                        .moments
                        .entry(p.key.clone())
                        .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(value: &'a mut [f64], grad: Option<&'a [f64]>, frozen: bool) -> ParamSlot<'a, f64> {
        ParamSlot { key: "p".into(), value, grad, frozen }
    }

    #[test]
    fn sgd_definition() {
        let mut opt = Optimizer::<f64>::new(OptimizerConfig::sgd(0.1));
        let mut p = [1.0];
        opt.step(&mut [slot(&mut p, Some(&[1.0]), false)]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam(0.5)] {
            let mut opt = Optimizer::<f64>::new(cfg);
            let mut p = [0.3, -2.0];
            opt.step(&mut [slot(&mut p, Some(&[0.0, 0.0]), false)]).unwrap();
            assert_eq!(p, [0.3, -2.0]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for g in [3.0, -0.02, 1e-3] {
            let mut opt = Optimizer::<f64>::new(OptimizerConfig::adam(1e-3));
            let mut p = [0.0];
            opt.step(&mut [slot(&mut p, Some(&[g]), false)]).unwrap();
            let want = -1e-3 * g / (f64::abs(g) + 1e-8);
            assert!((p[0] - want).abs() < 1e-15);
            assert!((p[0].abs() - 1e-3).abs() < 1e-7 && p[0].signum() == -g.signum());
        }
    }

    #[test]
    fn frozen_params_are_bit_identical() {
        let mut opt = Optimizer::<f64>::new(OptimizerConfig::adam(0.1));
        let mut frozen = [0.1 + 0.2, -1e-300];
        let mut live = [1.0];
        let before = frozen;
        for _ in 0..25 {
            opt.step(&mut [slot(&mut frozen, None, true), slot(&mut live, Some(&[0.7]), false)]).unwrap();
        }
        assert_eq!(frozen.map(f64::to_bits), before.map(f64::to_bits));
        assert!(live[0] < 1.0);
    }

    #[test]
    fn missing_gradient_is_contract_error_and_nothing_moves() {
        let mut opt = Optimizer::<f64>::new(OptimizerConfig::sgd(0.1));
        let mut a = [1.0];
        let mut b = [1.0];
        let err = opt.step(&mut [slot(&mut a, Some(&[1.0]), false), slot(&mut b, None, false)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!((a[0], opt.step_count()), (1.0, 0));
    }
}
