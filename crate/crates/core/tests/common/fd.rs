//! Finite-difference checks of every primitive against its backward pass.

use msrnn::tensor::{
    batchnorm, batchnorm_backward, batchnorm_train, batchnorm_train_backward, conv2d, conv2d_backward, deconv2d,
    deconv2d_backward, fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward,
    maxpool2x2, maxpool2x2_backward, relu, relu_backward, softmax_cross_entropy, BnStats, ConvParams, BN_EPSILON,
};
use msrnn::params::ParamStore;
use msrnn::unroll::{backward, classification_loss, forward, unroll, Mode};
use msrnn::Tensor;

use super::{fd_check, kink_free_tensor, random_tensor};

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

/// Scalar probe `<y, r>` whose gradient with respect to `y` is `r`.
fn probe(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r).unwrap()
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new([1, v.len(), 1, 1], v.to_vec()).unwrap()
}

fn check(x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
    fd_check(x, analytic, &mut f, H, FLOOR)
}

/// Worst relative error per primitive and argument.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for stride in [1, 2] {
        let x = random_tensor([2, 3, 6, 6], 1);
        let w = random_tensor([4, 3, 3, 3], 2);
        let p = ConvParams::new(w.clone(), stride, 1).with_bias(vec![0.1, -0.2, 0.3, 0.0]);
        let r = random_tensor(conv2d(&x, &p).unwrap().shape(), 3);
        let g = conv2d_backward(&x, &p, &r).unwrap();
        let with_w = |w: &Tensor| ConvParams { weights: w.clone(), ..p.clone() };
        out.push((format!("conv s{stride} input"), check(&x, &g.input, |x| probe(&conv2d(x, &p).unwrap(), &r))));
        out.push((format!("conv s{stride} weights"), check(&w, &g.weights, |w| probe(&conv2d(&x, &with_w(w)).unwrap(), &r))));
        out.push((
            format!("conv s{stride} bias"),
            check(&vec_tensor(p.bias.as_ref().unwrap()), &vec_tensor(g.bias.as_ref().unwrap()), |b| {
                probe(&conv2d(&x, &p.clone().with_bias(b.data().to_vec())).unwrap(), &r)
            }),
        ));

        let x = random_tensor([2, 4, 3, 3], 4);
        let w = random_tensor([4, 2, 3, 3], 5);
        let p = ConvParams::new(w.clone(), stride, 1).with_output_padding(stride - 1);
        let r = random_tensor(deconv2d(&x, &p).unwrap().shape(), 6);
        let g = deconv2d_backward(&x, &p, &r).unwrap();
        let with_w = |w: &Tensor| ConvParams { weights: w.clone(), ..p.clone() };
        out.push((format!("deconv s{stride} input"), check(&x, &g.input, |x| probe(&deconv2d(x, &p).unwrap(), &r))));
        out.push((format!("deconv s{stride} weights"), check(&w, &g.weights, |w| probe(&deconv2d(&x, &with_w(w)).unwrap(), &r))));
    }

    let x = random_tensor([3, 2, 3, 3], 7);
    let mut stats = BnStats::new(vec![0.1, -0.3], vec![0.7, 1.4]);
    stats.scale = Some(vec![1.2, 0.8]);
    stats.shift = Some(vec![0.1, -0.1]);
    let r = random_tensor(x.shape(), 8);
    let g = batchnorm_backward(&x, &stats, &r).unwrap();
    out.push(("batchnorm input".into(), check(&x, &g.input, |x| probe(&batchnorm(x, &stats).unwrap(), &r))));
    out.push((
        "batchnorm scale".into(),
        check(&vec_tensor(stats.scale.as_ref().unwrap()), &vec_tensor(g.scale.as_ref().unwrap()), |s| {
            let st = BnStats { scale: Some(s.data().to_vec()), ..stats.clone() };
            probe(&batchnorm(&x, &st).unwrap(), &r)
        }),
    ));

    let x = random_tensor([3, 2, 3, 3], 9);
    let (scale, shift) = ([1.3, 0.6], [0.2, -0.4]);
    let (y, cache) = batchnorm_train(&x, BN_EPSILON, Some(&scale), Some(&shift)).unwrap();
    let r = random_tensor(y.shape(), 10);
    let g = batchnorm_train_backward(&cache, &r).unwrap();
    let f = |x: &Tensor, sc: &[f64], sh: &[f64]| probe(&batchnorm_train(x, BN_EPSILON, Some(sc), Some(sh)).unwrap().0, &r);
    out.push(("batchnorm train input".into(), check(&x, &g.input, |x| f(x, &scale, &shift))));
    out.push((
        "batchnorm train scale".into(),
        check(&vec_tensor(&scale), &vec_tensor(g.scale.as_ref().unwrap()), |s| f(&x, s.data(), &shift)),
    ));
    out.push((
        "batchnorm train shift".into(),
        check(&vec_tensor(&shift), &vec_tensor(g.shift.as_ref().unwrap()), |b| f(&x, &scale, b.data())),
    ));

    let x = kink_free_tensor([2, 3, 4, 4], 11);
    let r = random_tensor(x.shape(), 12);
    let g = relu_backward(&x, &r).unwrap();
    out.push(("relu".into(), check(&x, &g, |x| probe(&relu(x), &r))));
    let rp = random_tensor([2, 3, 2, 2], 13);
    let g = maxpool2x2_backward(&x, &rp).unwrap();
    out.push(("maxpool".into(), check(&x, &g, |x| probe(&maxpool2x2(x).unwrap(), &rp))));
    let rg = random_tensor([2, 3, 1, 1], 14);
    let g = global_avg_pool_backward(x.shape(), &rg).unwrap();
    out.push(("global average pool".into(), check(&x, &g, |x| probe(&global_avg_pool(x).unwrap(), &rg))));

    let x = random_tensor([3, 4, 1, 1], 15);
    let w = random_tensor([5, 4, 1, 1], 16);
    let bias = [0.1, 0.2, -0.3, 0.0, 0.5];
    let r = random_tensor([3, 5, 1, 1], 17);
    let g = fully_connected_backward(&x, &w, Some(&bias), &r).unwrap();
    out.push(("fc input".into(), check(&x, &g.input, |x| probe(&fully_connected(x, &w, Some(&bias)).unwrap(), &r))));
    out.push(("fc weights".into(), check(&w, &g.weights, |w| probe(&fully_connected(&x, w, Some(&bias)).unwrap(), &r))));
    out.push((
        "fc bias".into(),
        check(&vec_tensor(&bias), &vec_tensor(g.bias.as_ref().unwrap()), |b| {
            probe(&fully_connected(&x, &w, Some(b.data())).unwrap(), &r)
        }),
    ));

    let logits = random_tensor([3, 5, 1, 1], 18);
    let labels = [0, 4, 2];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    out.push(("softmax cross-entropy".into(), check(&logits, &g, |l| softmax_cross_entropy(l, &labels).unwrap().0)));
    out
}

/// Whole-network gradient of a tied two-state model in training mode, per
/// parameter group. ReLU kinks can spoil a single step size, so each group
/// takes the better of `h` and `h / 10`.
pub fn network_errors() -> Vec<(String, f64)> {
    let (g, s, io) = super::toy_preset("fullrec_2state", 3, 2, 8);
    let u = unroll(&g, &s, &io, 3).unwrap();
    let store = ParamStore::init(&s, &u, 21).unwrap();
    let x = random_tensor([3, 3, 4, 4], 22);
    let labels = [2, 7, 5];
    let loss = |p: &ParamStore| {
        let out = forward(&u, p, &x, Mode::Train).unwrap();
        classification_loss(&out.logits, &labels).unwrap().0
    };
    let out = forward(&u, &store, &x, Mode::Train).unwrap();
    let (_, lg) = classification_loss(&out.logits, &labels).unwrap();
    let grads = backward(&u, &store, &out.cache, &lg).unwrap();
    assert_eq!(grads.len(), store.weights().len());
    store
        .weights()
        .iter()
        .map(|(name, w)| {
            let mut f = |w: &Tensor| {
                let mut p = store.clone();
                p.set_weight(name, w.clone()).unwrap();
                loss(&p)
            };
            let coarse = fd_check(w, &grads[name], &mut f, H, FLOOR);
            let fine = fd_check(w, &grads[name], &mut f, H / 10.0, FLOOR);
            (name.clone(), coarse.min(fine))
        })
        .collect()
}
