//! Convolution (cross-correlation, no kernel flip) and its transpose,
//! computed per sample with im2col + GEMM.

use super::gemm::{gemm, Op};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::exec;

/// Weights and geometry of a convolution or transposed convolution.
///
/// `weights` has shape `(out_channels, in_channels, kh, kw)` for [`conv2d`].
/// [`deconv2d`] reuses the same tensor as the adjoint map, so there it reads
/// as `(in_channels, out_channels, kh, kw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns appended to a transposed convolution's output.
    /// Must be smaller than `stride`; ignored by [`conv2d`].
    pub output_padding: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, stride: usize, padding: usize) -> Self {
        ConvParams {
            weights,
            bias: None,
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.height(), self.weights.width())
    }

    fn check(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        if self.output_padding >= self.stride {
            return Err(Error::Config(format!(
                "output padding {} must be smaller than stride {}",
                self.output_padding, self.stride
            )));
        }
        Ok(())
    }
}

/// Spatial output size of a convolution along one axis.
pub(crate) fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution along one axis.
pub(crate) fn deconv_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input - 1) * stride + kernel + output_padding).checked_sub(2 * padding).filter(|&s| s > 0)
}

/// Geometry relating an "image" side (the convolution input) to a "grid"
/// side (the convolution output).
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, image: &[f64], col: &mut [f64]) {
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if y < 0 || y >= self.height as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            *v = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-add `col` back onto `image` (adjoint of `im2col`).
    fn col2im(&self, col: &[f64], image: &mut [f64]) {
        image.iter_mut().for_each(|v| *v = 0.0);
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                plane[y as usize * self.width + x as usize] +=
                                    src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Vec<f64>>,
}

fn conv_geometry(input: &Tensor, p: &ConvParams) -> Result<Geometry> {
    p.check()?;
    let [cout, cin, kh, kw] = p.weights.shape();
    if input.channels() != cin {
        return Err(shape_err!(
            "conv2d: input has {} channels but weights {:?} expect {cin}",
            input.channels(),
            p.weights.shape()
        ));
    }
    if let Some(b) = &p.bias {
        if b.len() != cout {
            return Err(shape_err!("conv2d: bias length {} != out channels {cout}", b.len()));
        }
    }
    let out_h = conv_out_size(input.height(), kh, p.stride, p.padding);
    let out_w = conv_out_size(input.width(), kw, p.stride, p.padding);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(shape_err!(
            "conv2d: padded input {}x{} (padding {}) smaller than kernel {kh}x{kw}",
            input.height(),
            input.width(),
            p.padding
        ));
    };
    Ok(Geometry {
        channels: cin,
        height: input.height(),
        width: input.width(),
        kh,
        kw,
        stride: p.stride,
        padding: p.padding,
        out_h,
        out_w,
    })
}

fn deconv_geometry(input: &Tensor, p: &ConvParams) -> Result<Geometry> {
    p.check()?;
    let [cin, cout, kh, kw] = p.weights.shape();
    if input.channels() != cin {
        return Err(shape_err!(
            "deconv2d: input has {} channels but weights {:?} expect {cin}",
            input.channels(),
            p.weights.shape()
        ));
    }
    if let Some(b) = &p.bias {
        if b.len() != cout {
            return Err(shape_err!("deconv2d: bias length {} != out channels {cout}", b.len()));
        }
    }
    let h = deconv_out_size(input.height(), kh, p.stride, p.padding, p.output_padding);
    let w = deconv_out_size(input.width(), kw, p.stride, p.padding, p.output_padding);
    let (Some(height), Some(width)) = (h, w) else {
        return Err(shape_err!(
            "deconv2d: empty output for input {}x{} with kernel {kh}x{kw}, padding {}",
            input.height(),
            input.width(),
            p.padding
        ));
    };
    Ok(Geometry {
        channels: cout,
        height,
        width,
        kh,
        kw,
        stride: p.stride,
        padding: p.padding,
        out_h: input.height(),
        out_w: input.width(),
    })
}

fn add_bias(out: &mut [f64], bias: Option<&Vec<f64>>, plane: usize) {
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[c]);
        }
    }
}

fn bias_grad(grad_out: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = grad_out.shape();
    let plane = h * w;
    let mut g = vec![0.0; c];
    for b in 0..n {
        for (ch, gc) in g.iter_mut().enumerate() {
            let o = (b * c + ch) * plane;
            *gc += grad_out.data()[o..o + plane].iter().sum::<f64>();
        }
    }
    g
}

/// Concatenate per-sample input gradients and sum per-sample weight
/// gradients in sample order.
fn assemble(parts: Vec<(Vec<f64>, Vec<f64>)>, shape: [usize; 4], wlen: usize) -> Result<(Tensor, Vec<f64>)> {
    let mut gx = Vec::with_capacity(shape.iter().product());
    let mut gw = vec![0.0; wlen];
    for (x, w) in parts {
        gx.extend(x);
        for (a, v) in gw.iter_mut().zip(w) {
            *a += v;
        }
    }
    Ok((Tensor::new(shape, gx)?, gw))
}

/// 2-D cross-correlation of `input` with `p.weights`, plus optional bias.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = conv_geometry(input, p)?;
    let cout = p.weights.batch();
    let mut out = Tensor::zeros([input.batch(), cout, g.out_h, g.out_w]);
    let sample_out = cout * g.cols();
    let wdata = p.weights.data();
    exec::for_each_chunk(out.data_mut(), sample_out, |n, dst| {
        let mut col = vec![0.0; g.rows() * g.cols()];
        g.im2col(input.sample(n), &mut col);
        gemm(cout, g.rows(), g.cols(), wdata, Op::N, &col, Op::N, 0.0, dst);
        add_bias(dst, p.bias.as_ref(), g.cols());
    });
    Ok(out)
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = conv_geometry(input, p)?;
    let cout = p.weights.batch();
    let expected = [input.batch(), cout, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(shape_err!(
            "conv2d_backward: gradient shape {:?}, expected {expected:?}",
            grad_out.shape()
        ));
    }
    let wdata = p.weights.data();
    let in_len = input.sample_len();
    let wlen = p.weights.len();
    let parts = exec::map_indices(input.batch(), |n| {
        let gout = grad_out.sample(n);
        let mut col = vec![0.0; g.rows() * g.cols()];
        // dW_n = gout_n · col_nᵀ
        g.im2col(input.sample(n), &mut col);
        let mut gw = vec![0.0; wlen];
        gemm(cout, g.cols(), g.rows(), gout, Op::N, &col, Op::T, 0.0, &mut gw);
        // dcol = Wᵀ · gout_n
        gemm(g.rows(), cout, g.cols(), wdata, Op::T, gout, Op::N, 0.0, &mut col);
        let mut gx = vec![0.0; in_len];
        g.col2im(&col, &mut gx);
        (gx, gw)
    });
    let (grad_in, gw) = assemble(parts, input.shape(), wlen)?;
    Ok(ConvGrads {
        input: grad_in,
        weights: Tensor::new(p.weights.shape(), gw)?,
        bias: p.bias.as_ref().map(|_| bias_grad(grad_out)),
    })
}

/// Transposed convolution: the adjoint of [`conv2d`] under the same weights,
/// so `<conv2d(x), y> == <x, deconv2d(y)>` when biases are absent.
pub fn deconv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = deconv_geometry(input, p)?;
    let cin = input.channels();
    let mut out = Tensor::zeros([input.batch(), g.channels, g.height, g.width]);
    let sample_out = g.channels * g.height * g.width;
    let wdata = p.weights.data();
    exec::for_each_chunk(out.data_mut(), sample_out, |n, dst| {
        let mut col = vec![0.0; g.rows() * g.cols()];
        gemm(g.rows(), cin, g.cols(), wdata, Op::T, input.sample(n), Op::N, 0.0, &mut col);
        g.col2im(&col, dst);
        add_bias(dst, p.bias.as_ref(), g.height * g.width);
    });
    Ok(out)
}

pub fn deconv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = deconv_geometry(input, p)?;
    let cin = input.channels();
    let expected = [input.batch(), g.channels, g.height, g.width];
    if grad_out.shape() != expected {
        return Err(shape_err!(
            "deconv2d_backward: gradient shape {:?}, expected {expected:?}",
            grad_out.shape()
        ));
    }
    let wdata = p.weights.data();
    let wlen = p.weights.len();
    let parts = exec::map_indices(input.batch(), |n| {
        let mut col = vec![0.0; g.rows() * g.cols()];
        g.im2col(grad_out.sample(n), &mut col);
        // dx_n = W · im2col(gout_n)
        let mut gx = vec![0.0; input.sample_len()];
        gemm(cin, g.rows(), g.cols(), wdata, Op::N, &col, Op::N, 0.0, &mut gx);
        // dW_n = x_n · im2col(gout_n)ᵀ
        let mut gw = vec![0.0; wlen];
        gemm(cin, g.cols(), g.rows(), input.sample(n), Op::N, &col, Op::T, 0.0, &mut gw);
        (gx, gw)
    });
    let (grad_in, gw) = assemble(parts, input.shape(), wlen)?;
    Ok(ConvGrads {
        input: grad_in,
        weights: Tensor::new(p.weights.shape(), gw)?,
        bias: p.bias.as_ref().map(|_| bias_grad(grad_out)),
    })
}
