//! Forward and backward kernels for the fixed layer set.
//!
//! Activations are stored sample-major. Image activations use
//! channel-planar layout `[sample][channel][row][col]`.

use crate::linalg::gemm;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const L2_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Option<Self> {
        let pad = kernel / 2;
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        Some(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds a batch into a `(in_c·k·k) × (batch·out_h·out_w)` column matrix.
fn im2col(g: &ConvGeom, batch: usize, x: &[f64]) -> Vec<f64> {
    let ohw = g.out_spatial();
    let ncols = batch * ohw;
    let mut cols = vec![0.0; g.patch_len() * ncols];
    let in_sample = g.in_c * g.in_h * g.in_w;
    for n in 0..batch {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        for ci in 0..g.in_c {
            let plane = &xs[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (ci * g.kernel + ki) * g.kernel + kj;
                    let dst = &mut cols[row * ncols + n * ohw..row * ncols + (n + 1) * ohw];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                dst[oh * g.out_w + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into input layout.
fn col2im(g: &ConvGeom, batch: usize, cols: &[f64]) -> Vec<f64> {
    let ohw = g.out_spatial();
    let ncols = batch * ohw;
    let in_sample = g.in_c * g.in_h * g.in_w;
    let mut dx = vec![0.0; batch * in_sample];
    for n in 0..batch {
        let xs = &mut dx[n * in_sample..(n + 1) * in_sample];
        for ci in 0..g.in_c {
            let plane = &mut xs[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (ci * g.kernel + ki) * g.kernel + kj;
                    let src = &cols[row * ncols + n * ohw..row * ncols + (n + 1) * ohw];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                dst_row[iw as usize] += src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let ohw = g.out_spatial();
    let ncols = batch * ohw;
    let cols = im2col(g, batch, x);
    let mut tmp = vec![0.0; g.out_c * ncols];
    gemm(g.out_c, g.patch_len(), ncols, 1.0, w, false, &cols, false, 0.0, &mut tmp);
    let mut y = vec![0.0; batch * g.out_c * ohw];
    for co in 0..g.out_c {
        let bias = b[co];
        for n in 0..batch {
            let src = &tmp[co * ncols + n * ohw..co * ncols + (n + 1) * ohw];
            let dst = &mut y[(n * g.out_c + co) * ohw..(n * g.out_c + co + 1) * ohw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    y
}

/// Returns `dx` and accumulates into `dw`, `db`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let ohw = g.out_spatial();
    let ncols = batch * ohw;
    // dy to out_c × (batch·ohw)
    let mut dyc = vec![0.0; g.out_c * ncols];
    for n in 0..batch {
        for co in 0..g.out_c {
            let src = &dy[(n * g.out_c + co) * ohw..(n * g.out_c + co + 1) * ohw];
            dyc[co * ncols + n * ohw..co * ncols + (n + 1) * ohw].copy_from_slice(src);
        }
    }
    for co in 0..g.out_c {
        db[co] += dyc[co * ncols..(co + 1) * ncols].iter().sum::<f64>();
    }
    let cols = im2col(g, batch, x);
    gemm(g.out_c, ncols, g.patch_len(), 1.0, &dyc, false, &cols, true, 1.0, dw);
    let mut dcols = cols;
    gemm(g.patch_len(), g.out_c, ncols, 1.0, w, true, &dyc, false, 0.0, &mut dcols);
    col2im(g, batch, &dcols)
}

pub(crate) fn linear_forward(batch: usize, in_dim: usize, out_dim: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; batch * out_dim];
    for row in y.chunks_exact_mut(out_dim) {
        row.copy_from_slice(b);
    }
    gemm(batch, in_dim, out_dim, 1.0, x, false, w, true, 1.0, &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    for row in dy.chunks_exact(out_dim) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    gemm(out_dim, batch, in_dim, 1.0, dy, true, x, false, 1.0, dw);
    let mut dx = vec![0.0; batch * in_dim];
    gemm(batch, out_dim, in_dim, 1.0, dy, false, w, false, 0.0, &mut dx);
    dx
}

/// Per-channel batch statistics: (mean, biased variance, element count).
pub(crate) fn channel_stats(batch: usize, channels: usize, spatial: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>, usize) {
    let count = batch * spatial;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            s += x[off..off + spatial].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            v += x[off..off + spatial].iter().map(|a| (a - m) * (a - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count as f64;
    }
    (mean, var, count)
}

/// Normalizes with the given statistics. Returns `(y, xhat)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_apply(
    batch: usize,
    channels: usize,
    spatial: usize,
    x: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    batch: usize,
    channels: usize,
    spatial: usize,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dy: &[f64],
    batch_stats: bool,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let count = (batch * spatial) as f64;
    let mut dx = vec![0.0; dy.len()];
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let scale = gamma[c] * inv_std[c];
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                dx[i] = if batch_stats {
                    scale * (dy[i] - sum_dy / count - xhat[i] * sum_dy_xhat / count)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    dx
}

/// Max pooling without padding. Returns output and flat argmax per output.
pub(crate) fn maxpool_forward(
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let out_h = (in_h - kernel) / stride + 1;
    let out_w = (in_w - kernel) / stride + 1;
    let mut y = Vec::with_capacity(batch * channels * out_h * out_w);
    let mut arg = Vec::with_capacity(y.capacity());
    for plane in 0..batch * channels {
        let base = plane * in_h * in_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oh * stride * in_w + ow * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let i = base + (oh * stride + ki) * in_w + ow * stride + kj;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                y.push(x[best_i]);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}

pub(crate) fn l2_normalize_forward(batch: usize, features: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut norms = Vec::with_capacity(batch);
    for n in 0..batch {
        let xs = &x[n * features..(n + 1) * features];
        let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm >= L2_GUARD {
            for (d, s) in y[n * features..(n + 1) * features].iter_mut().zip(xs) {
                *d = s / norm;
            }
        }
    }
    (y, norms)
}

pub(crate) fn l2_normalize_backward(features: usize, y: &[f64], norms: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for (n, &norm) in norms.iter().enumerate() {
        if norm < L2_GUARD {
            continue;
        }
        let ys = &y[n * features..(n + 1) * features];
        let gs = &dy[n * features..(n + 1) * features];
        let proj: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((d, yv), gv) in dx[n * features..(n + 1) * features].iter_mut().zip(ys).zip(gs) {
            *d = (gv - yv * proj) / norm;
        }
    }
    dx
}
