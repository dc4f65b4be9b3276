//! Named parameter storage and the per-pass [`Session`] that binds stored
//! parameters into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Mode, Var};
use crate::tensor::{Scalar, Tensor};

/// What a stored tensor is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Conv or dense kernel. The only kind that receives weight decay.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    /// Batch-norm running mean; state, not a learnable.
    RunningMean,
    /// Batch-norm running variance; state, not a learnable.
    RunningVar,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered registry of uniquely named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    bn_stats_fitted: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            bn_stats_fitted: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of learnable scalars (kernels, biases, BN gamma/beta).
    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_learnable())
            .map(|e| e.value.len())
            .sum()
    }

    /// Whether the running statistics have seen a train-mode pass (or were
    /// loaded from a checkpoint).
    pub fn bn_stats_fitted(&self) -> bool {
        self.bn_stats_fitted
    }

    pub(crate) fn mark_bn_fitted(&mut self) {
        self.bn_stats_fitted = true;
    }

    /// Folds train-mode batch statistics into the running estimates:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            for (id, new) in [(u.stats.mean, &u.batch.mean), (u.stats.var, &u.batch.var)] {
                let entry = &mut self.entries[id.0];
                for (r, b) in entry.value.data_mut().iter_mut().zip(new) {
                    *r = T::from_f64(momentum * r.as_f64() + (1.0 - momentum) * b);
                }
            }
        }
        if !updates.is_empty() {
            self.bn_stats_fitted = true;
        }
    }
}

/// Gamma/beta pair of a batch norm.
#[derive(Clone, Copy, Debug)]
pub struct BnAffine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Running mean/variance pair of a batch norm.
#[derive(Clone, Copy, Debug)]
pub struct BnStats {
    pub mean: ParamId,
    pub var: ParamId,
}

/// Batch statistics destined for one [`BnStats`] pair.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub stats: BnStats,
    pub batch: BatchStats,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters become graph leaves the first time a layer asks for them.
pub struct Session<'a, T> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    leaves: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<StatUpdate>,
    track_grads: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        if mode == Mode::Eval && !store.bn_stats_fitted() {
            log::warn!("eval-mode batch norm before any train-mode update; using initial statistics (mean 0, var 1)");
        }
        Session {
            graph: Graph::new(),
            store,
            leaves: vec![None; store.len()],
            mode,
            updates: Vec::new(),
            track_grads: true,
        }
    }

    /// A session whose parameters are constants (no gradient bookkeeping).
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        let mut s = Self::new(store, Mode::Eval);
        s.track_grads = false;
        s
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let entry = self.store.get(id);
        let v = self
            .graph
            .leaf(entry.value.clone(), self.track_grads && entry.kind.is_learnable());
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.graph.constant(x)
    }

    /// An input that receives a gradient.
    pub fn input_leaf(&mut self, x: Tensor<T>) -> Var {
        self.graph.leaf(x, true)
    }

    pub fn batch_norm(&mut self, x: Var, affine: BnAffine, stats: BnStats) -> Result<Var> {
        let gamma = self.param(affine.gamma);
        let beta = self.param(affine.beta);
        let mean = self.store.get(stats.mean).value.to_f64_vec();
        let var = self.store.get(stats.var).value.to_f64_vec();
        let (y, batch) = self
            .graph
            .batch_norm(x, gamma, beta, self.mode, (&mean, &var), BN_EPS)?;
        if let Some(batch) = batch {
            self.updates.push(StatUpdate { stats, batch });
        }
        Ok(y)
    }

    /// Runs backward from `loss` and returns the gradient of every parameter
    /// that took part in the pass.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        self.graph.zero_grad();
        self.graph.backward(loss)?;
        Ok(self.param_grads())
    }

    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }

    /// Batch statistics gathered by train-mode batch norms, in call order.
    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.updates
    }

    pub fn into_stat_updates(self) -> Vec<StatUpdate> {
        self.updates
    }
}

/// Allocates named, initialized parameters under a dotted prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` inside a nested scope.
    pub fn scoped<R>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.push(scope);
        let r = f(self);
        self.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, kind, value)
    }

    /// He-normal kernel, `std = sqrt(2 / fan_in)`.
    pub fn kernel(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.add(name, ParamKind::Weight, t)
    }

    /// Multiplies an already allocated tensor by `factor`.
    pub fn rescale(&mut self, id: ParamId, factor: f64) {
        let e = self.store.get_mut(id);
        e.value = e.value.map(|v| T::from_f64(v.as_f64() * factor));
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<ParamId> {
        self.add(name, ParamKind::Bias, Tensor::zeros(vec![len]))
    }

    pub fn bn_affine(&mut self, name: &str, channels: usize) -> Result<BnAffine> {
        Ok(BnAffine {
            gamma: self.add(&format!("{name}.gamma"), ParamKind::BnGamma, Tensor::ones(vec![channels]))?,
            beta: self.add(&format!("{name}.beta"), ParamKind::BnBeta, Tensor::zeros(vec![channels]))?,
        })
    }

    pub fn bn_stats(&mut self, name: &str, channels: usize) -> Result<BnStats> {
        Ok(BnStats {
            mean: self.add(
                &format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(vec![channels]),
            )?,
            var: self.add(
                &format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::ones(vec![channels]),
            )?,
        })
    }
}
