use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{Grads, ParamSet};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }
}

/// Gradient-descent state. Only trainable entries of a [`ParamSet`] are
/// touched; frozen entries stay bit-identical.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f32> {
    pub config: OptimConfig,
    steps: u64,
    first_moment: BTreeMap<String, Vec<T>>,
    second_moment: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            steps: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGrad(name.to_string()))?;
            if g.shape() != p.value.shape() {
                return Err(shape_err(
                    "optimizer_step",
                    format!("gradient of `{name}` is {:?}, parameter is {:?}", g.shape(), p.value.shape()),
                ));
            }
        }
        self.steps += 1;
        let lr = T::lit(self.config.lr);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (name, p) in params.iter_mut() {
                    if !p.trainable {
                        continue;
                    }
                    let g = grads.get(name).expect("checked above");
                    for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let t = self.steps as i32;
                let c1 = T::lit(1.0 - b1.powi(t));
                let c2 = T::lit(1.0 - b2.powi(t));
                let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.config.eps));
                for (name, p) in params.iter_mut() {
                    if !p.trainable {
                        continue;
                    }
                    let g = grads.get(name).expect("checked above");
                    let n = g.numel();
                    let m = self
                        .first_moment
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let v = self
                        .second_moment
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); n]);
                    for (((w, &d), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
