use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments live alongside the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: ParamSet<T>, v: ParamSet<T>) -> Result<Self> {
        if m.names() != v.names() {
            return Err(Error::Param {
                name: "adam".into(),
                msg: "first and second moments disagree on parameter names".into(),
            });
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&ParamSet<T>, &ParamSet<T>) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Param {
                name: "adam".into(),
                msg: format!(
                    "{} gradients for {} parameters ({} moments)",
                    grads.len(),
                    params.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = T::from_f64_lossy(c.lr * bc2.sqrt() / bc1);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let eps = T::from_f64_lossy(c.eps * bc2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            if p.shape() != g.shape() {
                return Err(Error::Param {
                    name: format!("#{i}"),
                    msg: format!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            let m = self.m.get_mut(i).data_mut();
            let v = self.v.get_mut(i).data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv = *pv - step_size * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
