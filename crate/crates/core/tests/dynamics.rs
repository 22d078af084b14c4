mod common;

use common::*;
use msrnn::dynamics::{
    iterate_homogeneous, iterate_inhomogeneous, power_series_solve, FnOperator, LinearOperator,
};
use msrnn::params::ParamStore;
use msrnn::unroll::{forward, unroll, BnKey, Mode};
use nalgebra::{DMatrix, DVector};

fn random_vector(n: usize, seed: u64) -> DVector<f64> {
    let t = random_tensor([1, n, 1, 1], seed);
    DVector::from_vec(t.into_data())
}

#[test]
fn homogeneous_iteration_is_a_matrix_power() {
    let k = LinearOperator::random(6, 0.4, 1);
    let x0 = random_vector(6, 2);
    let kp = k.matrix() + DMatrix::<f64>::identity(6, 6);
    for n in [0, 1, 5, 12] {
        let want = kp.pow(n as u32) * &x0;
        let got = iterate_homogeneous(&k, &x0, n).unwrap();
        assert!((got - &want).norm() <= 1e-12 * want.norm().max(1.0), "n={n}");
    }
}

#[test]
fn inhomogeneous_iteration_is_a_partial_sum() {
    let kp = LinearOperator::random(5, 0.8, 3);
    let x = random_vector(5, 4);
    for n in [0, 1, 7] {
        let mut want = DVector::zeros(5);
        let mut term = x.clone();
        for _ in 0..=n {
            want += &term;
            term = kp.matrix() * &term;
        }
        let got = iterate_inhomogeneous(&kp, &x, n).unwrap();
        assert!((got - want).norm() < 1e-12);
    }
}

#[test]
fn contractive_series_matches_linear_solve() {
    for seed in 0..5 {
        let kp = LinearOperator::random(8, 0.7, 10 + seed);
        let x = random_vector(8, 20 + seed);
        let sol = power_series_solve(&kp, &x, 1e-12).unwrap();
        assert!(sol.converged);
        let a = DMatrix::<f64>::identity(8, 8) - kp.matrix();
        let want = a.lu().solve(&x).unwrap();
        assert!((&sol.state - &want).norm() < 1e-10 * want.norm(), "seed {seed}");
    }
}

#[test]
fn expanding_symmetric_operator_diverges() {
    let kp = LinearOperator::random_symmetric(6, 1.2, 5);
    assert!((kp.matrix() - kp.matrix().transpose()).norm() < 1e-15);
    assert!((kp.matrix().clone().svd(false, false).singular_values.max() - 1.2).abs() < 1e-12);
    let sol = power_series_solve(&kp, &random_vector(6, 6), 1e-10).unwrap();
    assert!(!sol.converged);
    let norms = &sol.term_norms;
    assert!(norms[norms.len() - 1] > norms[0]);
}

/// A shared-weight ResNet whose normalization statistics do not depend on
/// t is the homogeneous time-invariant iteration of its residual map.
#[test]
fn resnet_states_follow_homogeneous_iteration() {
    let t_max = 4;
    let (g, s, io) = toy_preset("resnet_1state", t_max, 4, 4);
    let u = unroll(&g, &s, &io, t_max).unwrap();
    let mut store = ParamStore::init(&s, &u, 30).unwrap();
    randomize_eval_state(&mut store, &u, 31);
    for layer in ["h1->h1/bn0", "h1->h1/bn1"] {
        let first = store.bn_stats(&BnKey { node: layer.into(), t: Some(1) }).unwrap().clone();
        for t in 2..=t_max {
            store.set_bn_stats(BnKey { node: layer.into(), t: Some(t) }, first.clone());
        }
    }
    let x = random_tensor([2, 3, 8, 8], 32);
    let out = forward(&u, &store, &x, Mode::Eval).unwrap();
    let x0 = out.cache.state(&u, "h1", 0).unwrap().clone();
    let k = FnOperator(|h: &msrnn::Tensor| Ok(resnet_k(&store, OracleMode::Eval, h, 1)));
    for t in 1..=t_max {
        let want = iterate_homogeneous(&k, &x0, t).unwrap();
        let got = out.cache.state(&u, "h1", t).unwrap();
        assert!(rel_err(got, &want) < 1e-6, "t={t}");
    }
}
