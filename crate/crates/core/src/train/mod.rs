//! Training protocol: shuffled mini-batches from a background producer,
//! SGD with momentum on a piecewise-constant learning-rate schedule, and
//! evaluation at arbitrary readout times.

pub mod data;

pub use data::{
    apply_augmentation, augment, load_cifar10, read_cifar_file, write_synthetic_cifar, Augmentation, Cifar10,
    Dataset, LabeledBatch,
};

use std::borrow::Cow;
use std::fs::File;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, IoSchedule, SharingSpec};
use crate::params::{ParamStore, SgdOptions, StatsPool};
use crate::tensor::Tensor;
use crate::unroll::{
    backward, classification_loss, forward, infer, unroll_with, BnTiming, Mode, UnrolledGraph,
};

/// Learning rate `lr` for epochs `first..=last` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStage {
    pub first: usize,
    pub last: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<LrStage>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
    /// Use only the first records of the training split.
    pub train_subset: Option<usize>,
    /// Use only the first records of the test split.
    pub test_subset: Option<usize>,
    pub bn_timing: BnTiming,
    /// Replace the running BN averages by exact statistics over the
    /// training set once training ends.
    pub bn_recompute: bool,
    /// Depth of the batch queue between loader and optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr_schedule: step_schedule(60),
            momentum: 0.9,
            weight_decay: 0.0,
            augment: true,
            seed: 0,
            train_subset: None,
            test_subset: None,
            bn_timing: BnTiming::TimeSpecific,
            bn_recompute: false,
            prefetch: 4,
        }
    }
}

/// The 0.01 / 0.001 / 0.0001 schedule with its 40/50/60 boundaries scaled to
/// `epochs`. Stages that would be empty are dropped.
pub fn step_schedule(epochs: usize) -> Vec<LrStage> {
    let b1 = ((epochs * 40) as f64 / 60.0).round() as usize;
    let b2 = ((epochs * 50) as f64 / 60.0).round() as usize;
    [(1, b1, 0.01), (b1 + 1, b2, 0.001), (b2 + 1, epochs, 0.0001)]
        .into_iter()
        .filter(|&(first, last, _)| first <= last)
        .map(|(first, last, lr)| LrStage { first, last, lr })
        .collect()
}

impl TrainConfig {
    /// Small-scale profile: fewer epochs (schedule rescaled) and data
    /// subsets. Optimization hyperparameters are unchanged.
    pub fn desk_scale() -> Self {
        TrainConfig {
            epochs: 6,
            lr_schedule: step_schedule(6),
            train_subset: Some(2000),
            test_subset: Some(1000),
            ..Default::default()
        }
    }

    /// Set `epochs` and rescale the schedule to match.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.lr_schedule = step_schedule(epochs);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.prefetch == 0 {
            problems.push("prefetch must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            problems.push(format!("weight_decay {} is negative", self.weight_decay));
        }
        let mut next = 1;
        for st in &self.lr_schedule {
            if st.first != next || st.last < st.first {
                problems.push(format!(
                    "lr_schedule stage {}..{} does not continue from epoch {next}",
                    st.first, st.last
                ));
            }
            if !(st.lr >= 0.0 && st.lr.is_finite()) {
                problems.push(format!("learning rate {} is not a finite non-negative number", st.lr));
            }
            next = st.last + 1;
        }
        if next != self.epochs + 1 {
            problems.push(format!("lr_schedule covers epochs 1..{} but training runs {} epochs", next - 1, self.epochs));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.lr_schedule
            .iter()
            .find(|s| (s.first..=s.last).contains(&epoch))
            .map(|s| s.lr)
            .ok_or_else(|| Error::Config(format!("no learning rate for epoch {epoch}")))
    }

    fn sgd(&self) -> SgdOptions {
        SgdOptions {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss (summed over readouts) across the epoch's batches.
    pub train_loss: f64,
    pub test_error: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub history: Vec<EpochMetrics>,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
}

/// Appends metrics rows to a CSV file, flushing after each.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        self.inner.serialize(m)?;
        self.inner.flush().map_err(|e| Error::Csv(e.into()))
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    (order, rng)
}

fn apply_subsets<'a>(data: &'a Cifar10, cfg: &TrainConfig) -> Cow<'a, Cifar10> {
    if cfg.train_subset.is_none() && cfg.test_subset.is_none() {
        Cow::Borrowed(data)
    } else {
        Cow::Owned(data.subset(cfg.train_subset, cfg.test_subset))
    }
}

/// Train from scratch; `on_epoch` sees each epoch's metrics as they are
/// produced. Batches are assembled (and augmented) on a producer thread and
/// handed over through a bounded queue, in an order fixed by the seed.
pub fn train(
    g: &GraphSpec,
    s: &SharingSpec,
    io: &IoSchedule,
    cfg: &TrainConfig,
    data: &Cifar10,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let horizon = io
        .max_readout()
        .ok_or_else(|| Error::Validation(vec!["no readout times".into()]))?;
    let u = unroll_with(g, s, io, horizon, cfg.bn_timing)?;
    let mut store = ParamStore::init(s, &u, cfg.seed)?;
    let data = apply_subsets(data, cfg);
    let data: &Cifar10 = &data;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Config("training and test splits must be non-empty".into()));
    }
    log::info!(
        "training: {} nodes, {} parameter groups, {} train / {} test records",
        u.nodes.len(),
        u.param_groups().len(),
        data.train.len(),
        data.test.len()
    );

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = None;
    let start = Instant::now();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<LabeledBatch>(cfg.prefetch);
        scope.spawn(move || {
            for epoch in 1..=cfg.epochs {
                let (order, mut rng) = epoch_order(data.train.len(), cfg.seed, epoch);
                for idx in order.chunks(cfg.batch_size) {
                    let mut batch = data.batch(&data.train, idx);
                    if cfg.augment {
                        batch = augment(&batch, &mut rng);
                    }
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            }
        });

        let batches_per_epoch = data.train.len().div_ceil(cfg.batch_size);
        for epoch in 1..=cfg.epochs {
            let lr = cfg.lr_at(epoch)?;
            let (mut loss_sum, mut seen) = (0.0, 0usize);
            for b in 0..batches_per_epoch {
                let batch = rx.recv().map_err(|_| Error::Config("batch producer stopped early".into()))?;
                let out = forward(&u, &store, &batch.images, Mode::Train)?;
                let (loss, logit_grads) = classification_loss(&out.logits, &batch.labels)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b, loss });
                }
                initial_loss.get_or_insert(loss);
                let grads = backward(&u, &store, &out.cache, &logit_grads)?;
                store.sgd_momentum_step(&u, &grads, lr, cfg.sgd())?;
                store.record_batch_stats(out.cache.batch_stats())?;
                loss_sum += loss * batch.labels.len() as f64;
                seen += batch.labels.len();
            }
            let test_error = evaluate(&store, &u, data, cfg.batch_size)?;
            let m = EpochMetrics {
                epoch,
                lr,
                train_loss: loss_sum / seen as f64,
                test_error,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: lr {lr} train_loss {:.4} test_error {:.4} ({:.1}s)",
                m.train_loss,
                m.test_error,
                m.wall_seconds
            );
            on_epoch(&m)?;
            history.push(m);
        }
        Ok(())
    })?;

    if cfg.bn_recompute {
        store.clear_bn_stats();
        collect_bn_stats(&mut store, &u, data, cfg.batch_size, false)?;
    }
    Ok(TrainOutcome {
        store,
        history,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
    })
}

/// Index of the largest logit per sample.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.sample_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of samples whose top-1 prediction differs from the label.
pub fn error_rate(logits: &Tensor, labels: &[usize]) -> f64 {
    let wrong = predictions(logits).iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len().max(1) as f64
}

/// Top-1 test error of the last readout of `u`. Does not modify `store`.
pub fn evaluate(store: &ParamStore, u: &UnrolledGraph, data: &Cifar10, batch_size: usize) -> Result<f64> {
    let n = data.test.len();
    let mut wrong = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for idx in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(&data.test, idx);
        let logits = infer(u, store, &batch.images)?;
        let (_, last) = logits.last().ok_or_else(|| Error::Config("graph has no readout".into()))?;
        wrong += error_rate(last, &batch.labels) * idx.len() as f64;
    }
    Ok(wrong / n.max(1) as f64)
}

/// Exact BN statistics from training-mode passes over the (unaugmented)
/// training split. With `only_missing`, keys that already have statistics
/// are left alone.
pub fn collect_bn_stats(
    store: &mut ParamStore,
    u: &UnrolledGraph,
    data: &Cifar10,
    batch_size: usize,
    only_missing: bool,
) -> Result<()> {
    let wanted: Vec<_> = u
        .bn_keys()
        .into_iter()
        .filter(|k| !only_missing || store.bn_stats(k).is_none())
        .cloned()
        .collect();
    if wanted.is_empty() {
        return Ok(());
    }
    let mut pools: std::collections::BTreeMap<_, StatsPool> = wanted.iter().map(|k| (k.clone(), StatsPool::default())).collect();
    let indices: Vec<usize> = (0..data.train.len()).collect();
    let mut batches = 0u64;
    for idx in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(&data.train, idx);
        let out = forward(u, store, &batch.images, Mode::Train)?;
        for (key, stats) in out.cache.batch_stats() {
            if let Some(pool) = pools.get_mut(key) {
                pool.add(stats, idx.len() as f64);
            }
        }
        batches += 1;
    }
    for (key, pool) in pools {
        let s = pool.finish();
        store.set_bn_stats(
            key,
            crate::params::RunningStats {
                mean: s.mean,
                variance: s.variance,
                count: batches,
            },
        );
    }
    Ok(())
}

/// Test error at readout time `t_test`, which may differ from the training
/// readout. Statistics for BN keys the trained store lacks are collected
/// from the training split on a copy of the store.
pub fn evaluate_at(
    store: &ParamStore,
    g: &GraphSpec,
    s: &SharingSpec,
    io: &IoSchedule,
    t_test: usize,
    cfg: &TrainConfig,
    data: &Cifar10,
) -> Result<f64> {
    let u = unroll_with(g, s, &io.with_readout(t_test), t_test, cfg.bn_timing)?;
    let data = apply_subsets(data, cfg);
    if u.bn_keys().iter().all(|k| store.bn_stats(k).is_some()) {
        return evaluate(store, &u, &data, cfg.batch_size);
    }
    let mut local = store.clone();
    collect_bn_stats(&mut local, &u, &data, cfg.batch_size, true)?;
    evaluate(&local, &u, &data, cfg.batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_matches_protocol() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr_at(1).unwrap(), 0.01);
        assert_eq!(cfg.lr_at(40).unwrap(), 0.01);
        assert_eq!(cfg.lr_at(41).unwrap(), 0.001);
        assert_eq!(cfg.lr_at(50).unwrap(), 0.001);
        assert_eq!(cfg.lr_at(51).unwrap(), 0.0001);
        assert_eq!(cfg.lr_at(60).unwrap(), 0.0001);
        assert!(cfg.lr_at(61).is_err());
    }

    #[test]
    fn rescaled_schedules_partition_the_epochs() {
        for epochs in 1..=70 {
            TrainConfig::default().with_epochs(epochs).validate().unwrap();
        }
        assert_eq!(step_schedule(6).iter().map(|s| s.last).collect::<Vec<_>>(), vec![4, 5, 6]);
    }

    #[test]
    fn gaps_in_schedule_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.lr_schedule[1].first = 42;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn one_hot_logits_have_zero_error() {
        let labels = [3, 0, 9];
        let logits = Tensor::from_fn([3, 10, 1, 1], |n, c, _, _| if c == labels[n] { 1.0 } else { 0.0 });
        assert_eq!(error_rate(&logits, &labels), 0.0);
        assert!((error_rate(&logits, &[3, 1, 9]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let (a, _) = epoch_order(100, 5, 1);
        let (b, _) = epoch_order(100, 5, 1);
        let (c, _) = epoch_order(100, 5, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
