//! First-order optimizers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 2e-2, momentum: 0.9 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub steps: u64,
    /// First (and for Adam, second) moment per parameter.
    pub state: BTreeMap<ParamId, Vec<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer { config, steps: 0, state: BTreeMap::new() }
    }

    /// Applies gradients for parameters of `store`; other entries are ignored.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &HashMap<ParamId, Tensor<T>>) -> Result<()> {
        self.steps += 1;
        let mut ids: Vec<&ParamId> = grads.keys().filter(|id| id.store == store.tag()).collect();
        ids.sort();
        for &id in ids {
            let g = &grads[&id];
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::config(format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
            match self.config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    let st = self.state.entry(id).or_insert_with(|| vec![Tensor::zeros(g.shape())]);
                    let v = &mut st[0];
                    let (mu, lr) = (T::lit(momentum), T::lit(lr));
                    for i in 0..v.len() {
                        v[i] = mu * v[i] + g[i];
                        p[i] -= lr * v[i];
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let st = self
                        .state
                        .entry(id)
                        .or_insert_with(|| vec![Tensor::zeros(g.shape()), Tensor::zeros(g.shape())]);
                    let t = self.steps as i32;
                    let c1 = T::lit(1.0 - beta1.powi(t));
                    let c2 = T::lit(1.0 - beta2.powi(t));
                    let (b1, b2, lr, eps) = (T::lit(beta1), T::lit(beta2), T::lit(lr), T::lit(eps));
                    for i in 0..g.len() {
                        st[0][i] = b1 * st[0][i] + (T::one() - b1) * g[i];
                        st[1][i] = b2 * st[1][i] + (T::one() - b2) * g[i] * g[i];
                        let mh = st[0][i] / c1;
                        let vh = st[1][i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. Summation runs in parameter order.
pub fn clip_grad_norm<T: Scalar>(grads: &mut HashMap<ParamId, Tensor<T>>, max_norm: f64) -> f64 {
    let mut ids: Vec<ParamId> = grads.keys().copied().collect();
    ids.sort();
    let norm = ids.iter().map(|id| grads[id].sq_norm().as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            *g = g.map(|v| v * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(config: OptimizerConfig) -> f64 {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.add("x", Tensor::full(&[2], 3.0));
        let mut opt = Optimizer::new(config);
        for _ in 0..300 {
            let g = store.get(id).map(|v| 2.0 * v);
            opt.step(&mut store, &HashMap::from([(id, g)])).unwrap();
        }
        store.get(id).sq_norm()
    }

    #[test]
    fn sgd_and_adam_minimize_quadratic() {
        assert!(quadratic_descent(OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9 }) < 1e-6);
        assert!(quadratic_descent(OptimizerConfig::Adam { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }) < 1e-3);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let a = ParamId { store: 0, index: 0 };
        let b = ParamId { store: 1, index: 0 };
        let mut grads = HashMap::from([(a, Tensor::<f64>::full(&[1], 3.0)), (b, Tensor::full(&[1], 4.0))]);
        assert_eq!(clip_grad_norm(&mut grads, 10.0), 5.0);
        assert_eq!(grads[&a][0], 3.0);
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((grads[&a][0] - 0.6).abs() < 1e-12 && (grads[&b][0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn foreign_store_gradients_ignored() {
        let mut store = ParamStore::<f64>::new(0);
        store.add("x", Tensor::full(&[1], 1.0));
        let before = store.clone();
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let foreign = ParamId { store: 1, index: 0 };
        opt.step(&mut store, &HashMap::from([(foreign, Tensor::full(&[1], 1.0))])).unwrap();
        assert_eq!(store, before);
    }
}
