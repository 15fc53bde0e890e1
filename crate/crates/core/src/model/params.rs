//! Named parameter tensors and batch-norm running statistics.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::batchnorm::{BnCache, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnGamma,
    BnBeta,
    PosEncoding,
}

impl ParamKind {
    /// Weight decay applies to conv and linear weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub name: String,
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
    running: Vec<RunningStats<S>>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            kinds: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            running: Vec::new(),
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        self.kinds[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters (running statistics excluded).
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn running(&self) -> &[RunningStats<S>] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats<S>] {
        &mut self.running
    }

    /// Registers every parameter as a tape leaf, in store order.
    pub fn leaves(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running(&mut self, tape: &Tape<S>, records: &[(usize, Var)]) -> Result<()> {
        for &(slot, v) in records {
            let cache: &BnCache<S> = tape
                .bn_cache(v)
                .ok_or_else(|| Error::Invalid(format!("variable {} is not a train-mode batch norm", v.index())))?;
            let r = &mut self.running[slot];
            crate::ops::batchnorm::update_running_stats(&mut r.mean, &mut r.var, cache, self.bn_momentum);
        }
        Ok(())
    }

    /// Element type conversion preserving names and order.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }
}

/// Allocates parameters in a fixed order from one seeded stream. Samples
/// are drawn in `f64` so that `f32` and `f64` builds agree up to rounding.
pub struct ParamBuilder<S = f32> {
    store: ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ParamBuilder<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, t: Tensor<S>) -> Result<usize> {
        if self.store.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let i = self.store.tensors.len();
        self.store.index.insert(name.clone(), i);
        self.store.names.push(name);
        self.store.kinds.push(kind);
        self.store.tensors.push(t);
        Ok(i)
    }

    /// Gaussian weight with std `sqrt(2 / fan_in)`.
    pub fn he(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> Result<usize> {
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64(z * std)
        })?;
        self.push(name, kind, t)
    }

    pub fn constant(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, value: f64) -> Result<usize> {
        let t = Tensor::full(shape, S::from_f64(value))?;
        self.push(name, kind, t)
    }

    /// Running statistics slot initialized to mean 0, variance 1.
    pub fn running(&mut self, name: String, channels: usize) -> Result<usize> {
        self.store.running.push(RunningStats {
            name,
            mean: Tensor::zeros(vec![channels])?,
            var: Tensor::ones(vec![channels])?,
        });
        Ok(self.store.running.len() - 1)
    }

    pub fn finish(self) -> ParamStore<S> {
        self.store
    }
}
