//! SGD with momentum and Adam over a [`ParamStore`].
//!
//! Weight decay is an L2 term added to the gradient of [`ParamKind::Weight`]
//! entries only. Optimizer state is kept in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimName {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub name: OptimName,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::adam(2e-4)
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimConfig {
            name: OptimName::Sgd,
            lr,
            momentum,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimConfig {
            name: OptimName::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    step: u64,
    /// SGD velocity or Adam first moment, per store entry.
    m: Vec<Option<Vec<f64>>>,
    /// Adam second moment.
    v: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Any non-finite gradient aborts the step before a
    /// single parameter is touched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            let e = store.get(*id);
            if g.shape() != e.value.shape() {
                return Err(Error::shape(
                    "optimizer",
                    format!("gradient {:?} vs parameter {} {:?}", g.shape(), e.name, e.value.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}; step aborted", e.name)));
            }
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (id, g) in grads {
            let entry = store.get_mut(*id);
            if !entry.kind.is_learnable() {
                continue;
            }
            let wd = if entry.kind.decays() { c.weight_decay } else { 0.0 };
            let n = g.len();
            let theta = entry.value.data_mut();
            let m = self.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
            match c.name {
                OptimName::Sgd => {
                    for i in 0..n {
                        let th = theta[i].as_f64();
                        let gi = g.data()[i].as_f64() + wd * th;
                        m[i] = c.momentum * m[i] + gi;
                        theta[i] = T::from_f64(th - c.lr * m[i]);
                    }
                }
                OptimName::Adam => {
                    let v = self.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
                    for i in 0..n {
                        let th = theta[i].as_f64();
                        let gi = g.data()[i].as_f64() + wd * th;
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        theta[i] = T::from_f64(th - c.lr * mh / (vh.sqrt() + c.eps));
                    }
                }
            }
        }
        Ok(())
    }
}
