//! Canonical parameter storage: one tensor per tied group, momentum
//! buffers, and running batch-norm statistics keyed by `(layer, t)`.
//!
//! Because every member of a tied group reads the same tensor, "equal
//! initial values" holds by construction, and because the backward pass
//! accumulates all member gradients into that group's slot, the update uses
//! the summed gradient.

mod checkpoint;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::SharingSpec;
use crate::tensor::{he_normal_fill, BnStats, Tensor, BN_EPSILON};
use crate::unroll::{BnKey, GradMap, ParamInit, UnrolledGraph};

/// Decay of the exponential moving average of batch statistics.
pub const BN_RUNNING_DECAY: f64 = 0.9;

/// Running mean/variance of one batch-norm key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Number of batches folded in.
    pub count: u64,
}

impl RunningStats {
    pub fn to_bn_stats(&self) -> BnStats {
        BnStats::new(self.mean.clone(), self.variance.clone())
    }
}

/// SGD hyperparameters besides the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdOptions {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    weights: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Tensor>,
    bn: BTreeMap<BnKey, RunningStats>,
}

impl ParamStore {
    /// Initialize every parameter group used by `u`: He-normal weights, zero
    /// biases and shifts, unit scales, zero momentum, no BN statistics.
    pub fn init(_sharing: &SharingSpec, u: &UnrolledGraph, seed: u64) -> Result<Self> {
        let mut decls: BTreeMap<&str, ParamInit> = BTreeMap::new();
        let mut shapes: BTreeMap<&str, [usize; 4]> = BTreeMap::new();
        for (name, decl) in &u.param_uses {
            match shapes.get(name.as_str()) {
                Some(shape) if *shape != decl.shape => {
                    return Err(shape_err!(
                        "inconsistent shapes within group `{name}`: {shape:?} vs {:?}",
                        decl.shape
                    ))
                }
                Some(_) => {}
                None => {
                    shapes.insert(name, decl.shape);
                    decls.insert(name, decl.init);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for (name, shape) in shapes {
            let mut t = Tensor::zeros(shape);
            match decls[name] {
                ParamInit::He { fan_in } => he_normal_fill(&mut t, fan_in, &mut rng),
                ParamInit::Zeros => {}
                ParamInit::Ones => t = Tensor::filled(shape, 1.0),
            }
            store.momentum.insert(name.to_string(), Tensor::zeros(shape));
            store.weights.insert(name.to_string(), t);
        }
        Ok(store)
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replace a group's tensor; the shape must not change.
    pub fn set_weight(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .weights
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(shape_err!(
                "group `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor> {
        self.momentum.get(name)
    }

    pub fn bn_stats(&self, key: &BnKey) -> Option<&RunningStats> {
        self.bn.get(key)
    }

    pub fn bn_entries(&self) -> &BTreeMap<BnKey, RunningStats> {
        &self.bn
    }

    pub fn set_bn_stats(&mut self, key: BnKey, stats: RunningStats) {
        self.bn.insert(key, stats);
    }

    pub fn clear_bn_stats(&mut self) {
        self.bn.clear();
    }

    /// Statistics for an eval-mode BN node, or the error naming it.
    pub fn require_bn(&self, key: &BnKey) -> Result<BnStats> {
        self.bn
            .get(key)
            .map(RunningStats::to_bn_stats)
            .ok_or_else(|| Error::MissingBnStats {
                node: key.node.clone(),
                t: key.t.map_or("shared".into(), |t| t.to_string()),
            })
    }

    /// One momentum step for every parameter group of `u`:
    /// `v <- momentum * v + g (+ weight_decay * w)`, `w <- w - lr * v`.
    /// Groups the graph does not use are left untouched.
    pub fn sgd_momentum_step(&mut self, u: &UnrolledGraph, grads: &GradMap, lr: f64, opts: SgdOptions) -> Result<()> {
        for name in u.param_groups().keys() {
            let g = grads
                .get(*name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            let w = self
                .weights
                .get_mut(*name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            let v = self
                .momentum
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            if g.shape() != w.shape() {
                return Err(shape_err!("gradient for `{name}` has shape {:?}, weight {:?}", g.shape(), w.shape()));
            }
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                *vi = opts.momentum * *vi + gi + opts.weight_decay * wi;
            }
            w.axpy(-lr, v)?;
        }
        Ok(())
    }

    /// Fold one batch's statistics into the running estimate for `key`. The
    /// first update copies the batch statistics.
    pub fn update_bn_running_stats(&mut self, key: &BnKey, batch: &BnStats) -> Result<()> {
        match self.bn.get_mut(key) {
            None => {
                self.bn.insert(
                    key.clone(),
                    RunningStats {
                        mean: batch.mean.clone(),
                        variance: batch.variance.clone(),
                        count: 1,
                    },
                );
            }
            Some(r) => {
                if r.mean.len() != batch.mean.len() {
                    return Err(shape_err!("running stats for {key} have {} channels, batch {}", r.mean.len(), batch.mean.len()));
                }
                let d = BN_RUNNING_DECAY;
                for (m, b) in r.mean.iter_mut().zip(&batch.mean) {
                    *m = d * *m + (1.0 - d) * b;
                }
                for (v, b) in r.variance.iter_mut().zip(&batch.variance) {
                    *v = d * *v + (1.0 - d) * b;
                }
                r.count += 1;
            }
        }
        Ok(())
    }

    /// Fold the statistics recorded by one training-mode forward pass.
    /// Several entries under one key (statistics shared across time) are
    /// pooled first.
    pub fn record_batch_stats(&mut self, stats: &[(BnKey, BnStats)]) -> Result<()> {
        let mut pooled: BTreeMap<&BnKey, StatsPool> = BTreeMap::new();
        for (key, s) in stats {
            pooled.entry(key).or_default().add(s, 1.0);
        }
        for (key, pool) in pooled {
            self.update_bn_running_stats(key, &pool.finish())?;
        }
        Ok(())
    }
}

/// Exact pooled mean/variance over several equally weighted batches.
#[derive(Clone, Debug, Default)]
pub struct StatsPool {
    sum_mean: Vec<f64>,
    sum_sq: Vec<f64>,
    weight: f64,
}

impl StatsPool {
    /// Add one batch's statistics with weight `w` (e.g. its sample count).
    pub fn add(&mut self, s: &BnStats, w: f64) {
        if self.sum_mean.is_empty() {
            self.sum_mean = vec![0.0; s.mean.len()];
            self.sum_sq = vec![0.0; s.mean.len()];
        }
        for c in 0..s.mean.len() {
            self.sum_mean[c] += w * s.mean[c];
            self.sum_sq[c] += w * (s.variance[c] + s.mean[c] * s.mean[c]);
        }
        self.weight += w;
    }

    pub fn finish(&self) -> BnStats {
        let mean: Vec<f64> = self.sum_mean.iter().map(|m| m / self.weight).collect();
        let variance = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / self.weight - m * m).max(0.0))
            .collect();
        let mut s = BnStats::new(mean, variance);
        s.epsilon = BN_EPSILON;
        s
    }
}
