mod common;

use common::*;
use msrnn::params::{ParamStore, RunningStats, StatsPool};
use msrnn::tensor::compute_bn_stats;
use msrnn::unroll::{forward, unroll, BnKey, Mode};
use msrnn::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn he_initialization_has_the_expected_spread() {
    let (g, s, io) = toy_preset("resnet_1state", 2, 16, 1);
    let u = unroll(&g, &s, &io, 2).unwrap();
    let store = ParamStore::init(&s, &u, 3).unwrap();
    let w = store.weight("h1->h1/L0").unwrap();
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = (2.0f64 / (9.0 * 16.0)).sqrt();
    assert!(mean.abs() < 0.1 * want, "mean {mean}");
    assert!((std - want).abs() < 0.05 * want, "std {std} vs {want}");
}

#[test]
fn running_mean_tracks_the_pooled_mean() {
    let mut r = rng(5);
    let dist = Normal::new(5.0, 1.0).unwrap();
    let key = BnKey { node: "probe".into(), t: Some(1) };
    let mut store = ParamStore::default();
    let mut pool = StatsPool::default();
    for _ in 0..100 {
        let batch = Tensor::from_fn([250, 1, 2, 2], |_, _, _, _| dist.sample(&mut r));
        let stats = compute_bn_stats(&batch).unwrap();
        store.update_bn_running_stats(&key, &stats).unwrap();
        pool.add(&stats, 1.0);
    }
    let pooled = pool.finish();
    let running = store.bn_stats(&key).unwrap();
    assert!((running.mean[0] - pooled.mean[0]).abs() < 0.01 * pooled.mean[0].abs());
    assert!((running.variance[0] - pooled.variance[0]).abs() < 0.05 * pooled.variance[0]);
    assert_eq!(running.count, 100);
}

#[test]
fn statistics_are_kept_per_time_step() {
    let (g, s, io) = toy_preset("resnet_1state", 3, 4, 4);
    let u = unroll(&g, &s, &io, 3).unwrap();
    let mut store = ParamStore::init(&s, &u, 1).unwrap();
    let x = random_tensor([4, 3, 8, 8], 2);
    let out = forward(&u, &store, &x, Mode::Train).unwrap();
    store.record_batch_stats(out.cache.batch_stats()).unwrap();
    let at = |store: &ParamStore, t| store.bn_stats(&BnKey { node: "h1->h1/bn0".into(), t: Some(t) }).unwrap().clone();
    let (s1, s2, s3) = (at(&store, 1), at(&store, 2), at(&store, 3));
    assert_ne!(s1.mean, s2.mean);
    assert_ne!(s2.mean, s3.mean);
    // The t=1 statistics are exactly the moments of the pre-net output.
    let h0 = out.cache.state(&u, "h1", 0).unwrap();
    let (m, v) = batch_moments(h0);
    for c in 0..m.len() {
        assert!((s1.mean[c] - m[c]).abs() < 1e-12);
        assert!((s1.variance[c] - v[c]).abs() < 1e-12);
    }
    // Overwriting one step leaves the others untouched.
    let mut r = rng(3);
    let c = s1.mean.len();
    store.set_bn_stats(
        BnKey { node: "h1->h1/bn0".into(), t: Some(2) },
        RunningStats { mean: (0..c).map(|_| r.random()).collect(), variance: vec![1.0; c], count: 1 },
    );
    assert_eq!(at(&store, 1), s1);
    assert_eq!(at(&store, 3), s3);
}
