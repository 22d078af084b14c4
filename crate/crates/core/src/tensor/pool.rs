use super::Tensor;
use crate::error::{shape_err, Result};

/// 2×2 max pooling with stride 2.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("maxpool2x2: spatial size {h}x{w} is not even"));
    }
    Ok(Tensor::from_fn([n, c, h / 2, w / 2], |b, ch, y, x| {
        let (y, x) = (2 * y, 2 * x);
        input
            .at(b, ch, y, x)
            .max(input.at(b, ch, y, x + 1))
            .max(input.at(b, ch, y + 1, x))
            .max(input.at(b, ch, y + 1, x + 1))
    }))
}

/// Routes each output gradient to the first maximal element of its window.
pub fn maxpool2x2_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 || grad_out.shape() != [n, c, h / 2, w / 2] {
        return Err(shape_err!(
            "maxpool2x2_backward: input {:?}, gradient {:?}",
            input.shape(),
            grad_out.shape()
        ));
    }
    let mut gin = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let mut best = (2 * y, 2 * x);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (yy, xx) = (2 * y + dy, 2 * x + dx);
                        if input.at(b, ch, yy, xx) > input.at(b, ch, best.0, best.1) {
                            best = (yy, xx);
                        }
                    }
                    let o = gin.offset(b, ch, best.0, best.1);
                    gin.data_mut()[o] += grad_out.at(b, ch, y, x);
                }
            }
        }
    }
    Ok(gin)
}

/// Spatial mean per (sample, channel); output shape `(n, c, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let data = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape() != [n, c, 1, 1] {
        return Err(shape_err!(
            "global_avg_pool_backward: gradient {:?} for input {input_shape:?}",
            grad_out.shape()
        ));
    }
    let plane = (h * w) as f64;
    Ok(Tensor::from_fn(input_shape, |b, ch, _, _| grad_out.at(b, ch, 0, 0) / plane))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_scan(x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        Tensor::from_fn([n, c, h / 2, w / 2], |b, ch, y, xx| {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.at(b, ch, 2 * y + dy, 2 * xx + dx));
                }
            }
            m
        })
    }

    #[test]
    fn maxpool_basic() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2x2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::filled([2, 3, 4, 6], 1.5);
        assert_eq!(maxpool2x2(&c).unwrap(), Tensor::filled([2, 3, 2, 3], 1.5));
        assert!(maxpool2x2(&Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let x = Tensor::from_fn([1, 2, 4, 4], |_, c, y, w| ((c * 16 + y * 4 + w) as f64 * 2.3).sin());
        assert_eq!(maxpool2x2(&x).unwrap(), window_scan(&x));
    }

    #[test]
    fn gap_values() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::filled([2, 2, 3, 3], -0.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| (v + 0.75).abs() < 1e-15));
    }

    #[test]
    fn gap_matches_direct_sum() {
        let x = Tensor::from_fn([3, 2, 5, 4], |n, c, y, w| ((n * 40 + c * 20 + y * 4 + w) as f64).sqrt());
        let g = global_avg_pool(&x).unwrap();
        for n in 0..3 {
            for c in 0..2 {
                let mut s = 0.0;
                for y in 0..5 {
                    for w in 0..4 {
                        s += x.at(n, c, y, w);
                    }
                }
                assert!((g.at(n, c, 0, 0) - s / 20.0).abs() < 1e-12);
            }
        }
    }
}
