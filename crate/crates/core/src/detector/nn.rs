//! Numeric building blocks with explicit forward/backward passes.
//!
//! All compute is f64. Convolutions go through im2col and the ndarray
//! matrix product so the training loops stay usable on a laptop CPU.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::synthgen::BBox;

/// Cached state from a convolution forward pass.
pub struct ConvCache {
    pub cols: Array2<f64>, // [C_in*k*k, OH*OW]
    pub out_h: usize,
    pub out_w: usize,
    pub in_shape: (usize, usize, usize),
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

fn im2col(
    input: &Array3<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array2<f64>, usize, usize) {
    let (c_in, h, w) = input.dim();
    let out_h = conv_out_size(h, kernel, stride, padding);
    let out_w = conv_out_size(w, kernel, stride, padding);
    let mut cols = Array2::zeros((c_in * kernel * kernel, out_h * out_w));
    for ci in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * out_w + ox]] = input[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    (cols, out_h, out_w)
}

fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Array3<f64> {
    let (c_in, h, w) = in_shape;
    let mut grad = Array3::zeros(in_shape);
    for ci in 0..c_in {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad[[ci, iy as usize, ix as usize]] += dcols[[row, oy * out_w + ox]];
                    }
                }
            }
        }
    }
    grad
}

/// `weight` is `[C_out, C_in*k*k]`, `bias` `[C_out]`.
pub fn conv2d_forward(
    input: &Array3<f64>,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array3<f64>, ConvCache) {
    let in_shape = input.dim();
    let (cols, out_h, out_w) = im2col(input, kernel, stride, padding);
    let mut out = weight.dot(&cols); // [C_out, OH*OW]
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row += b;
    }
    let c_out = weight.shape()[0];
    let out = out
        .into_shape_with_order((c_out, out_h, out_w))
        .expect("conv output reshape");
    (
        out,
        ConvCache {
            cols,
            out_h,
            out_w,
            in_shape,
        },
    )
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    grad_out: &Array3<f64>,
    weight: &Array2<f64>,
    cache: &ConvCache,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (c_out, oh, ow) = grad_out.dim();
    let g = grad_out
        .view()
        .into_shape_with_order((c_out, oh * ow))
        .expect("grad reshape");
    let d_weight = g.dot(&cache.cols.t());
    let d_bias = g.sum_axis(Axis(1));
    let d_cols = weight.t().dot(&g);
    let d_input = col2im(
        &d_cols,
        cache.in_shape,
        kernel,
        stride,
        padding,
        cache.out_h,
        cache.out_w,
    );
    (d_input, d_weight, d_bias)
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Backward through ReLU given the post-activation values.
pub fn relu_backward_inplace(grad: &mut Array3<f64>, post: &Array3<f64>) {
    grad.zip_mut_with(post, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Rows of `x` are samples: `y = x . W^T + b` with `W [out, in]`.
pub fn linear_forward(x: &Array2<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&weight.t());
    for mut row in y.axis_iter_mut(Axis(0)) {
        row += bias;
    }
    y
}

/// Returns `(d_x, d_weight, d_bias)`.
pub fn linear_backward(
    grad_out: &Array2<f64>,
    x: &Array2<f64>,
    weight: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d_x = grad_out.dot(weight);
    let d_weight = grad_out.t().dot(x);
    let d_bias = grad_out.sum_axis(Axis(0));
    (d_x, d_weight, d_bias)
}

pub fn relu2_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu2_backward_inplace(grad: &mut Array2<f64>, post: &Array2<f64>) {
    grad.zip_mut_with(post, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Inverted dropout mask: entries are 0 with probability `rate`, otherwise
/// `1/(1-rate)`.
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha12Rng) -> Array2<f64> {
    assert!((0.0..1.0).contains(&rate));
    let scale = 1.0 / (1.0 - rate);
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        // One draw per activation even at rate 0 keeps the stream stable.
        let keep = rng.gen::<f64>() >= rate;
        *v = if keep { scale } else { 0.0 };
    }
    mask
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy on a logit, numerically stable.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Smooth-L1 with beta 1 on one residual.
pub fn smooth_l1(diff: f64) -> f64 {
    let a = diff.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(diff: f64) -> f64 {
    if diff.abs() < 1.0 {
        diff
    } else {
        diff.signum()
    }
}

/// Four bilinear taps for one sampling point, channel independent.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub wy: f64,
    pub wx: f64,
}

impl BilinearTap {
    fn at(y: f64, x: f64, h: usize, w: usize) -> Self {
        // Pixel centers sit at integer + 0.5.
        let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        BilinearTap {
            y0,
            x0,
            y1,
            x1,
            wy: fy - y0 as f64,
            wx: fx - x0 as f64,
        }
    }

    fn sample(&self, feat: &Array3<f64>, c: usize) -> f64 {
        let v00 = feat[[c, self.y0, self.x0]];
        let v01 = feat[[c, self.y0, self.x1]];
        let v10 = feat[[c, self.y1, self.x0]];
        let v11 = feat[[c, self.y1, self.x1]];
        v00 * (1.0 - self.wy) * (1.0 - self.wx)
            + v01 * (1.0 - self.wy) * self.wx
            + v10 * self.wy * (1.0 - self.wx)
            + v11 * self.wy * self.wx
    }

    fn scatter(&self, grad: &mut Array3<f64>, c: usize, g: f64) {
        grad[[c, self.y0, self.x0]] += g * (1.0 - self.wy) * (1.0 - self.wx);
        grad[[c, self.y0, self.x1]] += g * (1.0 - self.wy) * self.wx;
        grad[[c, self.y1, self.x0]] += g * self.wy * (1.0 - self.wx);
        grad[[c, self.y1, self.x1]] += g * self.wy * self.wx;
    }
}

/// RoI-align with one sample per bin. `spatial_scale` maps image coordinates
/// onto the feature map. Output is the flattened `[C*PH*PW]` vector plus the
/// per-bin taps for the backward pass.
pub fn roi_align(
    feat: &Array3<f64>,
    bbox: &BBox,
    spatial_scale: f64,
    pooled: usize,
) -> (Array1<f64>, Vec<BilinearTap>) {
    let (c, h, w) = feat.dim();
    let x0 = bbox.x0 * spatial_scale;
    let y0 = bbox.y0 * spatial_scale;
    let bw = (bbox.width() * spatial_scale).max(1e-3);
    let bh = (bbox.height() * spatial_scale).max(1e-3);
    let bin_w = bw / pooled as f64;
    let bin_h = bh / pooled as f64;

    let mut taps = Vec::with_capacity(pooled * pooled);
    for py in 0..pooled {
        for px in 0..pooled {
            let sy = y0 + (py as f64 + 0.5) * bin_h;
            let sx = x0 + (px as f64 + 0.5) * bin_w;
            taps.push(BilinearTap::at(sy, sx, h, w));
        }
    }

    let mut out = Array1::zeros(c * pooled * pooled);
    for ci in 0..c {
        for (bin, tap) in taps.iter().enumerate() {
            out[ci * pooled * pooled + bin] = tap.sample(feat, ci);
        }
    }
    (out, taps)
}

pub fn roi_align_backward(
    grad_flat: &ndarray::ArrayView1<f64>,
    taps: &[BilinearTap],
    grad_feat: &mut Array3<f64>,
    pooled: usize,
) {
    let c = grad_feat.dim().0;
    for ci in 0..c {
        for (bin, tap) in taps.iter().enumerate() {
            tap.scatter(grad_feat, ci, grad_flat[ci * pooled * pooled + bin]);
        }
    }
}

/// Bilinear image resize, used by the scale augmentation.
pub fn resize_bilinear(input: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (c, h, w) = input.dim();
    if (new_h, new_w) == (h, w) {
        return input.clone();
    }
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let mut out = Array3::zeros((c, new_h, new_w));
    for y in 0..new_h {
        for x in 0..new_w {
            let tap = BilinearTap::at((y as f64 + 0.5) * sy, (x as f64 + 0.5) * sx, h, w);
            for ci in 0..c {
                out[[ci, y, x]] = tap.sample(input, ci);
            }
        }
    }
    out
}
