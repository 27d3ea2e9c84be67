//! Forward and backward kernels for every operator the network needs.
//!
//! These are pure functions: they read their inputs and explicit state
//! arguments and return fresh tensors, so they are safe to call concurrently
//! on disjoint data. [`super::Graph`] records compositions of them for
//! reverse-mode differentiation.

use crate::error::{Error, Result};

use super::{ConvSpec, Shape, Tensor};

/// Valid output-index range `[lo, hi)` such that `out * stride + offset`
/// stays inside `[0, limit)`.
#[inline]
fn valid_range(offset: isize, stride: usize, limit: usize, out_limit: usize) -> (usize, usize) {
    let stride = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + stride - 1) / stride
    };
    let hi = (limit as isize - 1 - offset).div_euclid(stride) + 1;
    let lo = lo.max(0) as usize;
    let hi = hi.clamp(0, out_limit as isize) as usize;
    (lo.min(hi), hi)
}

fn check_conv_weight(op: &'static str, w: &Tensor, rows: usize, cols: usize, spec: &ConvSpec) -> Result<()> {
    let ws = w.shape();
    if ws.n != rows {
        return Err(Error::ShapeMismatch {
            op,
            dim: "weight leading channels",
            expected: rows,
            got: ws.n,
        });
    }
    if ws.c != cols {
        return Err(Error::ShapeMismatch {
            op,
            dim: "weight trailing channels",
            expected: cols,
            got: ws.c,
        });
    }
    if ws.h != spec.kernel_h {
        return Err(Error::ShapeMismatch {
            op,
            dim: "kernel height",
            expected: spec.kernel_h,
            got: ws.h,
        });
    }
    if ws.w != spec.kernel_w {
        return Err(Error::ShapeMismatch {
            op,
            dim: "kernel width",
            expected: spec.kernel_w,
            got: ws.w,
        });
    }
    Ok(())
}

/// 2-D convolution. `w` is shaped `(out_channels, in_channels, kh, kw)`,
/// `bias` holds one value per output channel.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: "input channels",
            expected: spec.in_channels,
            got: xs.c,
        });
    }
    check_conv_weight("conv2d", w, spec.out_channels, spec.in_channels, spec)?;
    if bias.len() != spec.out_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: "bias channels",
            expected: spec.out_channels,
            got: bias.len(),
        });
    }

    let (oh, ow) = spec.conv_output_hw(xs.h, xs.w)?;
    let os = Shape::new(xs.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(os);

    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;
    let stride = spec.stride;

    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = os.index(n, co, 0, 0);
            out.data_mut()[obase..obase + oh * ow].fill(bias[co]);
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for kh in 0..spec.kernel_h {
                    let hoff = kh as isize * dil - pad;
                    let (h_lo, h_hi) = valid_range(hoff, stride, xs.h, oh);
                    for kw in 0..spec.kernel_w {
                        let woff = kw as isize * dil - pad;
                        let wv = w.at(co, ci, kh, kw);
                        if wv == 0.0 {
                            continue;
                        }
                        let (w_lo, w_hi) = valid_range(woff, stride, xs.w, ow);
                        for oy in h_lo..h_hi {
                            let iy = (oy * stride) as isize + hoff;
                            let xrow = xbase + iy as usize * xs.w;
                            let orow = obase + oy * ow;
                            for ox in w_lo..w_hi {
                                let ix = (ox * stride) as isize + woff;
                                out.data_mut()[orow + ox] += wv * x.data()[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input. `input_hw` pins the
/// spatial extents of the reconstructed gradient (strided convolutions map
/// several input extents onto the same output extent).
pub fn conv2d_grad_input(
    gy: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let gs = gy.shape();
    let (ih, iw) = input_hw;
    let xs = Shape::new(gs.n, spec.in_channels, ih, iw);
    let mut gx = Tensor::zeros(xs);

    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;
    let stride = spec.stride;

    for n in 0..gs.n {
        for co in 0..gs.c {
            let gbase = gs.index(n, co, 0, 0);
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for kh in 0..spec.kernel_h {
                    let hoff = kh as isize * dil - pad;
                    let (h_lo, h_hi) = valid_range(hoff, stride, xs.h, gs.h);
                    for kw in 0..spec.kernel_w {
                        let wv = w.at(co, ci, kh, kw);
                        if wv == 0.0 {
                            continue;
                        }
                        let woff = kw as isize * dil - pad;
                        let (w_lo, w_hi) = valid_range(woff, stride, xs.w, gs.w);
                        for oy in h_lo..h_hi {
                            let iy = (oy * stride) as isize + hoff;
                            let xrow = xbase + iy as usize * xs.w;
                            let grow = gbase + oy * gs.w;
                            for ox in w_lo..w_hi {
                                let ix = (ox * stride) as isize + woff;
                                gx.data_mut()[xrow + ix as usize] += wv * gy.data()[grow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Gradient of [`conv2d`] with respect to its weights.
pub fn conv2d_grad_weight(x: &Tensor, gy: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape();
    let gs = gy.shape();
    let ws = Shape::new(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w);
    let mut gw = Tensor::zeros(ws);

    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;
    let stride = spec.stride;

    for n in 0..xs.n {
        for co in 0..gs.c {
            let gbase = gs.index(n, co, 0, 0);
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for kh in 0..spec.kernel_h {
                    let hoff = kh as isize * dil - pad;
                    let (h_lo, h_hi) = valid_range(hoff, stride, xs.h, gs.h);
                    for kw in 0..spec.kernel_w {
                        let woff = kw as isize * dil - pad;
                        let (w_lo, w_hi) = valid_range(woff, stride, xs.w, gs.w);
                        let mut acc = 0.0;
                        for oy in h_lo..h_hi {
                            let iy = (oy * stride) as isize + hoff;
                            let xrow = xbase + iy as usize * xs.w;
                            let grow = gbase + oy * gs.w;
                            for ox in w_lo..w_hi {
                                let ix = (ox * stride) as isize + woff;
                                acc += gy.data()[grow + ox] * x.data()[xrow + ix as usize];
                            }
                        }
                        *gw.at_mut(co, ci, kh, kw) += acc;
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Per-output-channel sum of an output gradient; the bias gradient shared by
/// both convolution flavours.
pub fn grad_bias(gy: &Tensor) -> Vec<f64> {
    let gs = gy.shape();
    let mut gb = vec![0.0; gs.c];
    for n in 0..gs.n {
        for c in 0..gs.c {
            let base = gs.index(n, c, 0, 0);
            gb[c] += gy.data()[base..base + gs.plane()].iter().sum::<f64>();
        }
    }
    gb
}

/// Transposed convolution. `w` is shaped `(in_channels, out_channels, kh, kw)`
/// so that, bias aside, `deconv2d(y, w)` is the adjoint of `conv2d(x, w)` for
/// a matched spec.
pub fn deconv2d(x: &Tensor, w: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            dim: "input channels",
            expected: spec.in_channels,
            got: xs.c,
        });
    }
    check_conv_weight("deconv2d", w, spec.in_channels, spec.out_channels, spec)?;
    if bias.len() != spec.out_channels {
        return Err(Error::ShapeMismatch {
            op: "deconv2d",
            dim: "bias channels",
            expected: spec.out_channels,
            got: bias.len(),
        });
    }

    let (oh, ow) = spec.deconv_output_hw(xs.h, xs.w)?;
    let os = Shape::new(xs.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(os);

    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;
    let stride = spec.stride;

    for n in 0..xs.n {
        for co in 0..os.c {
            let obase = os.index(n, co, 0, 0);
            out.data_mut()[obase..obase + oh * ow].fill(bias[co]);
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for kh in 0..spec.kernel_h {
                    let hoff = kh as isize * dil - pad;
                    let (h_lo, h_hi) = valid_range(hoff, stride, oh, xs.h);
                    for kw in 0..spec.kernel_w {
                        let wv = w.at(ci, co, kh, kw);
                        if wv == 0.0 {
                            continue;
                        }
                        let woff = kw as isize * dil - pad;
                        let (w_lo, w_hi) = valid_range(woff, stride, ow, xs.w);
                        for iy in h_lo..h_hi {
                            let oy = (iy * stride) as isize + hoff;
                            let xrow = xbase + iy * xs.w;
                            let orow = obase + oy as usize * ow;
                            for ix in w_lo..w_hi {
                                let ox = (ix * stride) as isize + woff;
                                out.data_mut()[orow + ox as usize] += wv * x.data()[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`deconv2d`] with respect to its input: a gathering pass with
/// the same index map as the forward scatter.
pub fn deconv2d_grad_input(gy: &Tensor, w: &Tensor, spec: &ConvSpec, input_hw: (usize, usize)) -> Result<Tensor> {
    let gs = gy.shape();
    let xs = Shape::new(gs.n, spec.in_channels, input_hw.0, input_hw.1);
    let mut gx = Tensor::zeros(xs);

    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;
    let stride = spec.stride;

    for n in 0..xs.n {
        for co in 0..gs.c {
            let gbase = gs.index(n, co, 0, 0);
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for kh in 0..spec.kernel_h {
                    let hoff = kh as isize * dil - pad;
                    let (h_lo, h_hi) = valid_range(hoff, stride, gs.h, xs.h);
                    for kw in 0..spec.kernel_w {
                        let wv = w.at(ci, co, kh, kw);
                        if wv == 0.0 {
                            continue;
                        }
                        let woff = kw as isize * dil - pad;
                        let (w_lo, w_hi) = valid_range(woff, stride, gs.w, xs.w);
                        for iy in h_lo..h_hi {
                            let oy = (iy * stride) as isize + hoff;
                            let xrow = xbase + iy * xs.w;
                            let grow = gbase + oy as usize * gs.w;
                            for ix in w_lo..w_hi {
                                let ox = (ix * stride) as isize + woff;
                                gx.data_mut()[xrow + ix] += wv * gy.data()[grow + ox as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Gradient of [`deconv2d`] with respect to its weights.
pub fn deconv2d_grad_weight(x: &Tensor, gy: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape();
    let gs = gy.shape();
    let ws = Shape::new(spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
    let mut gw = Tensor::zeros(ws);

    let pad = spec.padding as isize;
    let dil = spec.dilation as isize;
    let stride = spec.stride;

    for n in 0..xs.n {
        for co in 0..gs.c {
            let gbase = gs.index(n, co, 0, 0);
            for ci in 0..xs.c {
                let xbase = xs.index(n, ci, 0, 0);
                for kh in 0..spec.kernel_h {
                    let hoff = kh as isize * dil - pad;
                    let (h_lo, h_hi) = valid_range(hoff, stride, gs.h, xs.h);
                    for kw in 0..spec.kernel_w {
                        let woff = kw as isize * dil - pad;
                        let (w_lo, w_hi) = valid_range(woff, stride, gs.w, xs.w);
                        let mut acc = 0.0;
                        for iy in h_lo..h_hi {
                            let oy = (iy * stride) as isize + hoff;
                            let xrow = xbase + iy * xs.w;
                            let grow = gbase + oy as usize * gs.w;
                            for ix in w_lo..w_hi {
                                let ox = (ix * stride) as isize + woff;
                                acc += x.data()[xrow + ix] * gy.data()[grow + ox as usize];
                            }
                        }
                        *gw.at_mut(ci, co, kh, kw) += acc;
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Running statistics of a batch-norm layer, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub const DEFAULT_EPSILON: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel statistics captured by a batch-norm forward pass, consumed by
/// its backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mode: BnMode,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch normalization over the `(N, H, W)` extent of every channel.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running state; infer mode reads the running state and leaves it untouched.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, BnSaved)> {
    let xs = x.shape();
    let c = xs.c;
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running state", state.channels()),
    ] {
        if len != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                dim: match name {
                    "gamma" => "gamma channels",
                    "beta" => "beta channels",
                    _ => "running state channels",
                },
                expected: c,
                got: len,
            });
        }
    }
    let m = xs.n * xs.plane();
    if m == 0 {
        return Err(Error::EmptyInput { op: "batch_norm" });
    }

    let (mean, inv_std) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for n in 0..xs.n {
                    let base = xs.index(n, ch, 0, 0);
                    sum += x.data()[base..base + xs.plane()].iter().sum::<f64>();
                }
                mean[ch] = sum / m as f64;
                let mut sq = 0.0;
                for n in 0..xs.n {
                    let base = xs.index(n, ch, 0, 0);
                    for &v in &x.data()[base..base + xs.plane()] {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / m as f64;
                if !mean[ch].is_finite() || !var[ch].is_finite() {
                    return Err(Error::non_finite("batch_norm", format!("statistics of channel {ch}")));
                }
            }
            // Unbiased variance feeds the running estimate, matching the
            // usual framework convention.
            let mom = state.momentum;
            for ch in 0..c {
                let running_var_sample = if m > 1 {
                    var[ch] * m as f64 / (m as f64 - 1.0)
                } else {
                    var[ch]
                };
                state.running_mean[ch] = (1.0 - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] = (1.0 - mom) * state.running_var[ch] + mom * running_var_sample;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
            (mean, inv_std)
        }
        BnMode::Infer => {
            for ch in 0..c {
                if !state.running_mean[ch].is_finite() || !state.running_var[ch].is_finite() {
                    return Err(Error::non_finite("batch_norm", format!("running statistics of channel {ch}")));
                }
            }
            let inv_std = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + state.epsilon).sqrt())
                .collect();
            (state.running_mean.clone(), inv_std)
        }
    };

    let mut out = Tensor::zeros(xs);
    for n in 0..xs.n {
        for ch in 0..c {
            let base = xs.index(n, ch, 0, 0);
            let (mu, istd) = (mean[ch], inv_std[ch]);
            let (g, b) = (gamma[ch], beta[ch]);
            for i in base..base + xs.plane() {
                out.data_mut()[i] = g * (x.data()[i] - mu) * istd + b;
            }
        }
    }
    Ok((out, BnSaved { mode, mean, inv_std }))
}

/// Backward pass of [`batch_norm`]. Returns `(gx, ggamma, gbeta)`.
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &[f64],
    saved: &BnSaved,
    gy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let c = xs.c;
    let m = (xs.n * xs.plane()) as f64;
    let plane = xs.plane();

    let mut gx = Tensor::zeros(xs);
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];

    for ch in 0..c {
        let mu = saved.mean[ch];
        let istd = saved.inv_std[ch];
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for n in 0..xs.n {
            let base = xs.index(n, ch, 0, 0);
            for i in base..base + plane {
                let xhat = (x.data()[i] - mu) * istd;
                sum_gy += gy.data()[i];
                sum_gy_xhat += gy.data()[i] * xhat;
            }
        }
        gbeta[ch] = sum_gy;
        ggamma[ch] = sum_gy_xhat;
        let g = gamma[ch];
        match saved.mode {
            BnMode::Train => {
                for n in 0..xs.n {
                    let base = xs.index(n, ch, 0, 0);
                    for i in base..base + plane {
                        let xhat = (x.data()[i] - mu) * istd;
                        gx.data_mut()[i] =
                            g * istd * (gy.data()[i] - sum_gy / m - xhat * sum_gy_xhat / m);
                    }
                }
            }
            BnMode::Infer => {
                for n in 0..xs.n {
                    let base = xs.index(n, ch, 0, 0);
                    for i in base..base + plane {
                        gx.data_mut()[i] = g * istd * gy.data()[i];
                    }
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        } else if *v == 0.0 {
            *v = 0.0; // normalize -0.0
        }
    }
    out
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x.shape());
    for ((g, &xv), &gyv) in gx.data_mut().iter_mut().zip(x.data()).zip(gy.data()) {
        *g = if xv > 0.0 { gyv } else { 0.0 };
    }
    gx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Backward of sigmoid, expressed through the forward output `y`.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(y.shape());
    for ((g, &yv), &gyv) in gx.data_mut().iter_mut().zip(y.data()).zip(gy.data()) {
        *g = gyv * yv * (1.0 - yv);
    }
    gx
}

/// Mean over every spatial plane; output is `N x C x 1 x 1`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.plane() == 0 {
        return Err(Error::EmptyInput { op: "global_avg_pool" });
    }
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c, 1, 1));
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = xs.index(n, c, 0, 0);
            let sum: f64 = x.data()[base..base + xs.plane()].iter().sum();
            *out.at_mut(n, c, 0, 0) = sum / xs.plane() as f64;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(input_shape: Shape, gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let scale = 1.0 / input_shape.plane() as f64;
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = gy.at(n, c, 0, 0) * scale;
            let base = input_shape.index(n, c, 0, 0);
            gx.data_mut()[base..base + input_shape.plane()].fill(g);
        }
    }
    gx
}

/// Multiplies every spatial location of channel `c` in sample `n` by
/// `s[n, c]`. `s` must be `N x C x 1 x 1`.
pub fn channel_scale(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ss = s.shape();
    if ss.n != xs.n {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            dim: "batch",
            expected: xs.n,
            got: ss.n,
        });
    }
    if ss.c != xs.c {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            dim: "channels",
            expected: xs.c,
            got: ss.c,
        });
    }
    if ss.h != 1 || ss.w != 1 {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            dim: "scale spatial extent",
            expected: 1,
            got: ss.h.max(ss.w),
        });
    }
    let mut out = x.clone();
    for n in 0..xs.n {
        for c in 0..xs.c {
            let sv = s.at(n, c, 0, 0);
            let base = xs.index(n, c, 0, 0);
            for v in &mut out.data_mut()[base..base + xs.plane()] {
                *v *= sv;
            }
        }
    }
    Ok(out)
}

/// Backward of [`channel_scale`]; returns `(gx, gs)`.
pub fn channel_scale_backward(x: &Tensor, s: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let mut gx = Tensor::zeros(xs);
    let mut gs = Tensor::zeros(s.shape());
    for n in 0..xs.n {
        for c in 0..xs.c {
            let sv = s.at(n, c, 0, 0);
            let base = xs.index(n, c, 0, 0);
            let mut acc = 0.0;
            for i in base..base + xs.plane() {
                gx.data_mut()[i] = gy.data()[i] * sv;
                acc += gy.data()[i] * x.data()[i];
            }
            *gs.at_mut(n, c, 0, 0) = acc;
        }
    }
    (gx, gs)
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput { op: "concat_channels" })?;
    let fs = first.shape();
    let mut c_total = 0;
    for p in parts {
        let ps = p.shape();
        if ps.n != fs.n {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                dim: "batch",
                expected: fs.n,
                got: ps.n,
            });
        }
        if ps.h != fs.h || ps.w != fs.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                dim: "spatial extent",
                expected: fs.h * fs.w,
                got: ps.h * ps.w,
            });
        }
        c_total += ps.c;
    }
    let os = Shape::new(fs.n, c_total, fs.h, fs.w);
    let mut out = Tensor::zeros(os);
    for n in 0..fs.n {
        let mut c_off = 0;
        for p in parts {
            let ps = p.shape();
            let src = ps.index(n, 0, 0, 0);
            let dst = os.index(n, c_off, 0, 0);
            let span = ps.c * ps.plane();
            out.data_mut()[dst..dst + span].copy_from_slice(&p.data()[src..src + span]);
            c_off += ps.c;
        }
    }
    Ok(out)
}

/// Copies `count` channels starting at `offset`; the inverse view of
/// [`concat_channels`].
pub fn slice_channels(x: &Tensor, offset: usize, count: usize) -> Result<Tensor> {
    let xs = x.shape();
    if offset + count > xs.c {
        return Err(Error::ShapeMismatch {
            op: "slice_channels",
            dim: "channels",
            expected: xs.c,
            got: offset + count,
        });
    }
    let os = Shape::new(xs.n, count, xs.h, xs.w);
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        let src = xs.index(n, offset, 0, 0);
        let dst = os.index(n, 0, 0, 0);
        let span = count * xs.plane();
        out.data_mut()[dst..dst + span].copy_from_slice(&x.data()[src..src + span]);
    }
    Ok(out)
}

/// Nearest-neighbor 2x upsampling: each source pixel becomes a 2x2 block.
pub fn upsample2x_nearest(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    let v = x.at(n, c, h, w);
                    let base = os.index(n, c, 2 * h, 2 * w);
                    out.data_mut()[base] = v;
                    out.data_mut()[base + 1] = v;
                    out.data_mut()[base + os.w] = v;
                    out.data_mut()[base + os.w + 1] = v;
                }
            }
        }
    }
    out
}

/// Backward of [`upsample2x_nearest`]: sums each 2x2 block.
pub fn upsample2x_backward(gy: &Tensor) -> Tensor {
    let gs = gy.shape();
    let xs = Shape::new(gs.n, gs.c, gs.h / 2, gs.w / 2);
    let mut gx = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for h in 0..xs.h {
                for w in 0..xs.w {
                    let base = gs.index(n, c, 2 * h, 2 * w);
                    *gx.at_mut(n, c, h, w) = gy.data()[base]
                        + gy.data()[base + 1]
                        + gy.data()[base + gs.w]
                        + gy.data()[base + gs.w + 1];
                }
            }
        }
    }
    gx
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            dim: "element count",
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

pub fn scale(x: &Tensor, k: f64) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v *= k;
    }
    out
}

pub fn sum(x: &Tensor) -> f64 {
    x.data().iter().sum()
}

/// Mean of weighted squared differences. `weights` holds one value per
/// `(sample, channel)` pair and broadcasts over the spatial extent; a zero
/// weight removes that map from the loss entirely.
pub fn weighted_mse(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64> {
    let ps = pred.shape();
    if target.shape() != ps {
        return Err(Error::ShapeMismatch {
            op: "weighted_mse",
            dim: "element count",
            expected: pred.len(),
            got: target.len(),
        });
    }
    if weights.len() != ps.n * ps.c {
        return Err(Error::ShapeMismatch {
            op: "weighted_mse",
            dim: "weight count",
            expected: ps.n * ps.c,
            got: weights.len(),
        });
    }
    let mut acc = 0.0;
    for n in 0..ps.n {
        for c in 0..ps.c {
            let wgt = weights[n * ps.c + c];
            if wgt == 0.0 {
                continue;
            }
            let base = ps.index(n, c, 0, 0);
            for i in base..base + ps.plane() {
                let d = pred.data()[i] - target.data()[i];
                acc += wgt * d * d;
            }
        }
    }
    Ok(acc / ps.len() as f64)
}

/// Gradient of [`weighted_mse`] with respect to `pred`, scaled by the
/// incoming loss gradient `gy`.
pub fn weighted_mse_grad(pred: &Tensor, target: &Tensor, weights: &[f64], gy: f64) -> Tensor {
    let ps = pred.shape();
    let mut gx = Tensor::zeros(ps);
    let scale = 2.0 * gy / ps.len() as f64;
    for n in 0..ps.n {
        for c in 0..ps.c {
            let wgt = weights[n * ps.c + c];
            if wgt == 0.0 {
                continue;
            }
            let base = ps.index(n, c, 0, 0);
            for i in base..base + ps.plane() {
                gx.data_mut()[i] = scale * wgt * (pred.data()[i] - target.data()[i]);
            }
        }
    }
    gx
}
