use super::gemm::{gemm, Op};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err!("relu_backward: {:?} vs {:?}", input.shape(), grad_out.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err!("add: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Sum of one or more equally shaped tensors, accumulated in slice order.
pub fn add_n(parts: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| shape_err!("add_n: no operands"))?;
    let mut out = (*first).clone();
    for p in rest {
        out.add_assign(p)?;
    }
    Ok(out)
}

/// Gradients of a fully-connected layer.
#[derive(Clone, Debug)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
}

fn fc_dims(input: &Tensor, weights: &Tensor, bias: Option<&[f64]>) -> Result<(usize, usize, usize)> {
    let n = input.batch();
    let fin = input.sample_len();
    let fout = weights.batch();
    if weights.sample_len() != fin {
        return Err(shape_err!(
            "fully_connected: input has {fin} features, weights {:?} expect {}",
            weights.shape(),
            weights.sample_len()
        ));
    }
    if let Some(b) = bias {
        if b.len() != fout {
            return Err(shape_err!("fully_connected: bias length {} != {fout}", b.len()));
        }
    }
    Ok((n, fin, fout))
}

/// Affine map `y = W x + b` per batch element. `weights` has shape
/// `(out, in_c, in_h, in_w)`, the same layout as a 1×1 convolution when the
/// input is spatially 1×1. Output shape `(n, out, 1, 1)`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let (n, fin, fout) = fc_dims(input, weights, bias)?;
    let mut out = vec![0.0; n * fout];
    gemm(n, fin, fout, input.data(), Op::N, weights.data(), Op::T, 0.0, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(b).for_each(|(y, b)| *y += b);
        }
    }
    Tensor::new([n, fout, 1, 1], out)
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f64]>,
    grad_out: &Tensor,
) -> Result<FcGrads> {
    let (n, fin, fout) = fc_dims(input, weights, bias)?;
    if grad_out.len() != n * fout {
        return Err(shape_err!("fully_connected_backward: gradient {:?}", grad_out.shape()));
    }
    let mut gx = vec![0.0; n * fin];
    gemm(n, fout, fin, grad_out.data(), Op::N, weights.data(), Op::N, 0.0, &mut gx);
    let mut gw = vec![0.0; fout * fin];
    gemm(fout, n, fin, grad_out.data(), Op::T, input.data(), Op::N, 0.0, &mut gw);
    let gb = bias.map(|_| {
        let mut g = vec![0.0; fout];
        for row in grad_out.data().chunks(fout) {
            g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        g
    });
    Ok(FcGrads {
        input: Tensor::new(input.shape(), gx)?,
        weights: Tensor::new(weights.shape(), gw)?,
        bias: gb,
    })
}

/// Mean softmax cross-entropy over the batch, and its gradient with respect
/// to the logits: `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let k = logits.sample_len();
    if labels.len() != n {
        return Err(shape_err!("softmax_cross_entropy: {} labels for batch {n}", labels.len()));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, &label) in grad.data_mut().chunks_mut(k).zip(labels) {
        if label >= k {
            return Err(Error::Config(format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        loss += z.ln() - (row[label].ln());
        for v in row.iter_mut() {
            *v /= z * n as f64;
        }
        row[label] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}
