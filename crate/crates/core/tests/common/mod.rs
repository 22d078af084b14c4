//! Independent reference implementations shared by the integration tests.
//! The oracles never call the library's numeric kernels: convolutions are
//! direct loops, normalization is written out per channel, and parameter
//! counts come from walking nodes rather than from declared shapes.
#![allow(dead_code)]

pub mod fd;

use std::collections::BTreeMap;

use msrnn::graph::{preset, GraphSpec, IoSchedule, PresetOptions, SharingSpec};
use msrnn::params::{ParamStore, RunningStats};
use msrnn::unroll::{unroll, NodeOp, UnrolledGraph};
use msrnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
}

/// Values bounded away from zero and pairwise distinct, so ReLU and max
/// pooling are differentiable at every coordinate under small perturbations.
pub fn kink_free_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| 0.05 + i as f64 * 0.9 / n as f64).collect();
    for v in values.iter_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        values.swap(i, j);
    }
    Tensor::new(shape, values).unwrap()
}

/// Direct convolution, weights `(cout, cin, k, k)`.
pub fn conv_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, _] = w.shape();
    assert_eq!(cin, wcin);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn([n, cout, oh, ow], |b, co, oy, ox| {
        let mut acc = 0.0;
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(b, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

/// Direct transposed convolution by scattering, weights `(cin, cout, k, k)`.
pub fn deconv_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize, out_pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [wcin, cout, k, _] = w.shape();
    assert_eq!(cin, wcin);
    let oh = (h - 1) * stride + k + out_pad - 2 * pad;
    let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    for b in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.at(b, ci, y, xx);
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                let ox = (xx * stride + kx) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let (oy, ox) = (oy as usize, ox as usize);
                                    let cur = out.at(b, co, oy, ox);
                                    out.set(b, co, oy, ox, cur + v * w.at(ci, co, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-channel batch mean and biased variance.
pub fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h).flat_map(move |y| (0..w).map(move |xx| (b, y, xx))))
            .map(|(b, y, xx)| x.at(b, ch, y, xx))
            .collect();
        mean[ch] = vals.iter().sum::<f64>() / count;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
    }
    (mean, var)
}

pub fn bn_direct(x: &Tensor, mean: &[f64], var: &[f64], scale: Option<&[f64]>, shift: Option<&[f64]>) -> Tensor {
    let eps = 1e-5;
    Tensor::from_fn(x.shape(), |b, c, y, xx| {
        let z = (x.at(b, c, y, xx) - mean[c]) / (var[c] + eps).sqrt();
        z * scale.map_or(1.0, |s| s[c]) + shift.map_or(0.0, |s| s[c])
    })
}

pub fn relu_direct(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |b, c, y, xx| x.at(b, c, y, xx).max(0.0))
}

pub fn sum_direct(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |n, c, y, x| a.at(n, c, y, x) + b.at(n, c, y, x))
}

pub fn gap_direct(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                s += x.at(b, ch, y, xx);
            }
        }
        s / (h * w) as f64
    })
}

pub fn fc_direct(x: &Tensor, w: &Tensor, bias: &[f64]) -> Tensor {
    let [n, c, _, _] = x.shape();
    let k = w.batch();
    Tensor::from_fn([n, k, 1, 1], |b, o, _, _| bias[o] + (0..c).map(|i| x.at(b, i, 0, 0) * w.at(o, i, 0, 0)).sum::<f64>())
}

/// Small-geometry preset: input and states shrunk by `shrink` in space,
/// first-state width `channels`.
pub fn toy_preset(name: &str, t: usize, channels: usize, shrink: usize) -> (GraphSpec, SharingSpec, IoSchedule) {
    let opts = PresetOptions {
        readout: Some(t),
        base_channels: Some(channels),
        ..Default::default()
    };
    let (mut g, s, io) = preset(name, &opts).unwrap();
    g.input.height /= shrink;
    g.input.width /= shrink;
    for st in &mut g.states {
        st.height /= shrink;
        st.width /= shrink;
    }
    (g, s, io)
}

/// Random-but-valid running statistics for every BN key of `u`, and
/// randomized post-net affine parameters.
pub fn randomize_eval_state(store: &mut ParamStore, u: &UnrolledGraph, seed: u64) {
    let mut r = rng(seed);
    for n in &u.nodes {
        if let NodeOp::BatchNorm { stats, .. } = &n.op {
            let c = n.dims[0];
            store.set_bn_stats(
                stats.clone(),
                RunningStats {
                    mean: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
                    variance: (0..c).map(|_| r.random_range(0.5..2.0)).collect(),
                    count: 1,
                },
            );
        }
    }
    for name in ["post/bn.scale", "post/bn.shift"] {
        let shape = store.weight(name).unwrap().shape();
        let t = Tensor::from_fn(shape, |_, _, _, _| r.random_range(0.5..1.5));
        store.set_weight(name, t).unwrap();
    }
}

/// Parameter count by walking the nodes: each distinct conv/deconv/fc
/// parameter name is counted once, with its size derived from the node's
/// input and output channel counts; the post-net BN contributes scale and
/// shift for its channels.
pub fn node_walk_param_count(u: &UnrolledGraph) -> usize {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut post_bn_channels = None;
    for n in &u.nodes {
        let cin = n.inputs.first().map(|&i| u.nodes[i].dims[0]);
        match &n.op {
            NodeOp::Conv { param, .. } | NodeOp::Deconv { param, .. } => {
                seen.entry(param.clone()).or_insert(9 * cin.unwrap() * n.dims[0]);
            }
            NodeOp::FullyConnected { weight, bias } => {
                seen.entry(weight.clone()).or_insert(cin.unwrap() * n.dims[0]);
                seen.entry(bias.clone()).or_insert(n.dims[0]);
            }
            NodeOp::BatchNorm { affine: true, .. } => post_bn_channels = Some(n.dims[0]),
            _ => {}
        }
    }
    seen.values().sum::<usize>() + post_bn_channels.map_or(0, |c| 2 * c)
}

/// Unroll at the preset's own readout.
pub fn unroll_preset(g: &GraphSpec, s: &SharingSpec, io: &IoSchedule) -> UnrolledGraph {
    unroll(g, s, io, io.max_readout().unwrap()).unwrap()
}

/// Central finite difference of `f` along every coordinate of `x`, compared
/// against `analytic`. Returns the worst relative error, where the
/// denominator is floored at `floor` to ignore vanishing gradients.
pub fn fd_check(x: &Tensor, analytic: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64, h: f64, floor: f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

/// Relative error `|a - b| / max(|b|, tiny)` in the sup norm.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// How the oracle normalizes: with stored running statistics or with the
/// moments of the current batch.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Eval,
    Train,
}

fn oracle_bn(store: &ParamStore, mode: OracleMode, x: &Tensor, node: &str, t: usize, affine: bool) -> Tensor {
    let (mean, var) = match mode {
        OracleMode::Train => batch_moments(x),
        OracleMode::Eval => {
            let key = msrnn::unroll::BnKey { node: node.into(), t: Some(t) };
            let r = store.bn_stats(&key).expect("oracle needs stats");
            (r.mean.clone(), r.variance.clone())
        }
    };
    if affine {
        let scale = store.weight("post/bn.scale").unwrap().data().to_vec();
        let shift = store.weight("post/bn.shift").unwrap().data().to_vec();
        bn_direct(x, &mean, &var, Some(&scale), Some(&shift))
    } else {
        bn_direct(x, &mean, &var, None, None)
    }
}

/// The residual map `K_t` of the 1-state ResNet: BN-ReLU-Conv-BN-ReLU-Conv.
pub fn resnet_k(store: &ParamStore, mode: OracleMode, h: &Tensor, t: usize) -> Tensor {
    let w = |n: &str| store.weight(n).unwrap().clone();
    let a = relu_direct(&oracle_bn(store, mode, h, "h1->h1/bn0", t, false));
    let a = conv_direct(&a, &w("h1->h1/L0"), 1, 1);
    let b = relu_direct(&oracle_bn(store, mode, &a, "h1->h1/bn1", t, false));
    conv_direct(&b, &w("h1->h1/L1"), 1, 1)
}

/// Logits of the 1-state ResNet computed as the explicit iteration
/// `h_t = K_t(h_{t-1}) + h_{t-1}` from the pre-net output.
pub fn resnet_1state_oracle(store: &ParamStore, mode: OracleMode, x: &Tensor, t_max: usize) -> Tensor {
    let mut h = conv_direct(x, store.weight("pre/conv0").unwrap(), 1, 1);
    for t in 1..=t_max {
        h = sum_direct(&resnet_k(store, mode, &h, t), &h);
    }
    post_net_oracle(store, mode, &h, t_max)
}

pub fn post_net_oracle(store: &ParamStore, mode: OracleMode, h: &Tensor, t: usize) -> Tensor {
    let y = relu_direct(&oracle_bn(store, mode, h, "post/bn", t, true));
    fc_direct(&gap_direct(&y), store.weight("post/fc.weight").unwrap(), store.weight("post/fc.bias").unwrap().data())
}
