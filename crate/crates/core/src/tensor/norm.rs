use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Default epsilon added to the variance before taking the square root.
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel normalization statistics, with optional affine parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub epsilon: f64,
    pub scale: Option<Vec<f64>>,
    pub shift: Option<Vec<f64>>,
}

impl BnStats {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        BnStats {
            mean,
            variance,
            epsilon: BN_EPSILON,
            scale: None,
            shift: None,
        }
    }

    /// Zero mean, unit variance.
    pub fn identity(channels: usize) -> Self {
        Self::new(vec![0.0; channels], vec![1.0; channels])
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        let lens = [
            Some(self.mean.len()),
            Some(self.variance.len()),
            self.scale.as_ref().map(Vec::len),
            self.shift.as_ref().map(Vec::len),
        ];
        if lens.iter().flatten().any(|&l| l != channels) {
            return Err(shape_err!(
                "batchnorm: statistics for {} channels applied to {channels} channels",
                self.mean.len()
            ));
        }
        if !(self.epsilon > 0.0) && self.variance.iter().any(|&v| v <= 0.0) {
            return Err(Error::Config("batchnorm: zero variance with epsilon 0".into()));
        }
        Ok(())
    }

    fn inv_std(&self) -> Vec<f64> {
        self.variance
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect()
    }
}

/// Per-channel mean and biased variance over batch and spatial positions,
/// computed in two passes.
pub fn compute_bn_stats(batch: &Tensor) -> Result<BnStats> {
    let [n, c, h, w] = batch.shape();
    let count = (n * h * w) as f64;
    if count == 0.0 {
        return Err(shape_err!("compute_bn_stats: empty batch"));
    }
    let plane = h * w;
    let mut mean = vec![0.0; c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let o = (b * c + ch) * plane;
            *m += batch.data()[o..o + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let o = (b * c + ch) * plane;
            *v += batch.data()[o..o + plane]
                .iter()
                .map(|x| (x - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok(BnStats::new(mean, var))
}

fn for_each_plane(t: &mut Tensor, mut f: impl FnMut(usize, &mut [f64])) {
    let [_, c, h, w] = t.shape();
    let plane = h * w;
    for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        f(i % c, chunk);
    }
}

/// Normalize `input` with fixed statistics, then apply scale/shift if set.
pub fn batchnorm(input: &Tensor, stats: &BnStats) -> Result<Tensor> {
    stats.check(input.channels())?;
    let inv = stats.inv_std();
    let mut out = input.clone();
    for_each_plane(&mut out, |c, plane| {
        let g = stats.scale.as_ref().map_or(1.0, |s| s[c]);
        let b = stats.shift.as_ref().map_or(0.0, |s| s[c]);
        plane
            .iter_mut()
            .for_each(|x| *x = (*x - stats.mean[c]) * inv[c] * g + b);
    });
    Ok(out)
}

/// Gradients of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub scale: Option<Vec<f64>>,
    pub shift: Option<Vec<f64>>,
}

fn affine_grads(grad_out: &Tensor, x_hat: &Tensor, stats: &BnStats) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = grad_out.channels();
    let plane = grad_out.height() * grad_out.width();
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for (i, (g, xh)) in grad_out
        .data()
        .chunks(plane)
        .zip(x_hat.data().chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        dshift[ch] += g.iter().sum::<f64>();
        dscale[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
    }
    (
        stats.scale.as_ref().map(|_| dscale),
        stats.shift.as_ref().map(|_| dshift),
    )
}

/// Backward pass of [`batchnorm`] with the statistics held constant.
pub fn batchnorm_backward(input: &Tensor, stats: &BnStats, grad_out: &Tensor) -> Result<BnGrads> {
    stats.check(input.channels())?;
    if grad_out.shape() != input.shape() {
        return Err(shape_err!("batchnorm_backward: gradient {:?} vs input {:?}", grad_out.shape(), input.shape()));
    }
    let inv = stats.inv_std();
    let mut x_hat = input.clone();
    for_each_plane(&mut x_hat, |c, p| p.iter_mut().for_each(|x| *x = (*x - stats.mean[c]) * inv[c]));
    let (scale, shift) = affine_grads(grad_out, &x_hat, stats);
    let mut gin = grad_out.clone();
    for_each_plane(&mut gin, |c, p| {
        let g = stats.scale.as_ref().map_or(1.0, |s| s[c]);
        p.iter_mut().for_each(|x| *x *= inv[c] * g);
    });
    Ok(BnGrads { input: gin, scale, shift })
}

/// Saved state of a training-mode batch norm, needed by its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub stats: BnStats,
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

/// Training-mode batch norm: normalize with the statistics of `input`
/// itself. Returns the output and the cache (whose `stats` are the batch
/// statistics, for running-average bookkeeping).
pub fn batchnorm_train(
    input: &Tensor,
    epsilon: f64,
    scale: Option<&[f64]>,
    shift: Option<&[f64]>,
) -> Result<(Tensor, BnCache)> {
    let mut stats = compute_bn_stats(input)?;
    stats.epsilon = epsilon;
    stats.scale = scale.map(<[f64]>::to_vec);
    stats.shift = shift.map(<[f64]>::to_vec);
    stats.check(input.channels())?;
    let inv_std = stats.inv_std();
    let mut x_hat = input.clone();
    for_each_plane(&mut x_hat, |c, p| {
        p.iter_mut().for_each(|x| *x = (*x - stats.mean[c]) * inv_std[c])
    });
    let mut out = x_hat.clone();
    if scale.is_some() || shift.is_some() {
        for_each_plane(&mut out, |c, p| {
            let g = scale.map_or(1.0, |s| s[c]);
            let b = shift.map_or(0.0, |s| s[c]);
            p.iter_mut().for_each(|x| *x = *x * g + b);
        });
    }
    Ok((out, BnCache { stats, x_hat, inv_std }))
}

/// Backward pass of [`batchnorm_train`], differentiating through the batch
/// statistics.
pub fn batchnorm_train_backward(cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(shape_err!(
            "batchnorm_train_backward: gradient {:?} vs input {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        ));
    }
    let [n, c, h, w] = grad_out.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let (scale, shift) = affine_grads(grad_out, &cache.x_hat, &cache.stats);
    // dx̂ = dy·γ; dx = inv_std/N · (N·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))
    let gamma = |ch: usize| cache.stats.scale.as_ref().map_or(1.0, |s| s[ch]);
    let mut sum_d = vec![0.0; c];
    let mut sum_dx = vec![0.0; c];
    for (i, (g, xh)) in grad_out
        .data()
        .chunks(plane)
        .zip(cache.x_hat.data().chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma(ch);
        sum_d[ch] += k * g.iter().sum::<f64>();
        sum_dx[ch] += k * g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut gin = grad_out.clone();
    for (i, (gi, xh)) in gin
        .data_mut()
        .chunks_mut(plane)
        .zip(cache.x_hat.data().chunks(plane))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma(ch);
        let inv = cache.inv_std[ch];
        for (d, x) in gi.iter_mut().zip(xh) {
            *d = inv / count * (count * k * *d - sum_d[ch] - x * sum_dx[ch]);
        }
    }
    Ok(BnGrads { input: gin, scale, shift })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_batch_normalizes_to_plus_minus_one() {
        let x = Tensor::new([2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut stats = compute_bn_stats(&x).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.variance, vec![1.0]);
        stats.epsilon = 1e-300;
        let y = batchnorm(&x, &stats).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn identity_stats_leave_input_unchanged() {
        let x = Tensor::new([1, 2, 1, 2], vec![0.5, -1.0, 2.0, 7.0]).unwrap();
        let mut s = BnStats::identity(2);
        s.epsilon = 0.0;
        assert_eq!(batchnorm(&x, &s).unwrap(), x);
    }

    #[test]
    fn constant_batch_maps_to_zero() {
        let x = Tensor::filled([3, 1, 1, 1], 5.0);
        let s = compute_bn_stats(&x).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.variance, vec![0.0]);
        assert!(batchnorm(&x, &s).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_count_mismatch_is_an_error() {
        let x = Tensor::zeros([1, 3, 2, 2]);
        assert!(batchnorm(&x, &BnStats::identity(2)).is_err());
    }

    #[test]
    fn two_pass_oracle() {
        let x = Tensor::from_fn([4, 3, 2, 2], |n, c, y, w| ((n * 7 + c * 13 + y * 3 + w) as f64 * 1.7).sin() * 4.0 + c as f64);
        let s = compute_bn_stats(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..2).flat_map(move |y| (0..2).map(move |w| (n, y, w))))
                .map(|(n, y, w)| x.at(n, c, y, w))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((s.mean[c] - m).abs() < 1e-12);
            assert!((s.variance[c] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let x = Tensor::from_fn([5, 2, 3, 3], |n, c, y, w| ((n + 2 * c + 3 * y + 5 * w) as f64).cos() * 3.0 + 10.0);
        let (y, cache) = batchnorm_train(&x, BN_EPSILON, None, None).unwrap();
        assert_eq!(cache.stats, {
            let mut s = compute_bn_stats(&x).unwrap();
            s.epsilon = BN_EPSILON;
            s
        });
        let s = compute_bn_stats(&y).unwrap();
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-6);
            assert!((s.variance[c] - 1.0).abs() < 1e-3);
        }
    }
}
