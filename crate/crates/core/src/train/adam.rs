use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moments are kept for trainable parameters
/// only, indexed like the store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = |_| None;
        Ok(Adam {
            config,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`. If any
    /// moment or updated value would be non-finite nothing is changed and
    /// the step counter does not advance.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step + 1;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        let mut staged = Vec::new();
        for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
            let i = id.index();
            let g = p.grad.data();
            let mut m = self.m[i].clone().unwrap_or_else(|| vec![0.0; g.len()]);
            let mut v = self.v[i].clone().unwrap_or_else(|| vec![0.0; g.len()]);
            let mut value = p.value.data().to_vec();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                value[k] -= update;
                if !(m[k].is_finite() && v[k].is_finite() && value[k].is_finite()) {
                    return Err(Error::Numeric(format!(
                        "Adam step {t} aborted: non-finite state for `{}` at index {k} (gradient {})",
                        p.name, g[k]
                    )));
                }
            }
            let value = Tensor::new(p.value.shape().clone(), value, p.value.precision())?;
            staged.push((id, m, v, value));
        }
        for (id, m, v, value) in staged {
            self.m[id.index()] = Some(m);
            self.v[id.index()] = Some(v);
            store.set_value(id, value)?;
        }
        self.step = t;
        Ok(())
    }
}
