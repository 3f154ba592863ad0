//! Raw forward/backward loops for the layer types the engine supports.
//!
//! All kernels operate on flat row-major slices. Work is split over the
//! batch dimension (forward, input gradients) or the output-channel
//! dimension (weight gradients); every reduction runs in a fixed order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{shape_err, Result};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return shape_err(format!("conv2d input must be [N,C,H,W], got {input:?}"));
        }
        if weight.len() != 4 {
            return shape_err(format!("conv2d weight must be [K,C,kh,kw], got {weight:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be at least 1");
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (k, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if c != wc {
            return shape_err(format!("conv2d input has {c} channels but weight {weight:?} expects {wc}"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: k,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output positions `o` in `[lo, hi)` for which `o*stride + offset - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > offset { ((in_len + pad - offset - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let in_sample = g.in_channels * in_plane;
    let out_sample = g.out_channels * out_plane;
    let mut out = vec![0.0; g.batch * out_sample];
    out.par_chunks_mut(out_sample.max(1)).enumerate().for_each(|(n, out_n)| {
        let x_n = &x[n * in_sample..(n + 1) * in_sample];
        for k in 0..g.out_channels {
            let out_k = &mut out_n[k * out_plane..(k + 1) * out_plane];
            out_k.fill(bias[k]);
            for c in 0..g.in_channels {
                let x_c = &x_n[c * in_plane..(c + 1) * in_plane];
                let w_kc = &weight[(k * g.in_channels + c) * g.kh * g.kw..][..g.kh * g.kw];
                for i in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, g.stride, g.pad, i);
                    for j in 0..g.kw {
                        let wv = w_kc[i * g.kw + j];
                        let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, g.stride, g.pad, j);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + i - g.pad;
                            let row_in = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                            let row_out = &mut out_k[oy * g.out_w..(oy + 1) * g.out_w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + j - g.pad;
                                let n_ox = ox_hi - ox_lo;
                                for (o, v) in row_out[ox_lo..ox_hi].iter_mut().zip(&row_in[ix0..ix0 + n_ox]) {
                                    *o += wv * v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * g.stride + j - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv2d_backward(x: &[f64], weight: &[f64], dy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let in_sample = g.in_channels * in_plane;
    let out_sample = g.out_channels * out_plane;
    let ksize = g.kh * g.kw;

    let mut dx = vec![0.0; g.batch * in_sample];
    dx.par_chunks_mut(in_sample.max(1)).enumerate().for_each(|(n, dx_n)| {
        let dy_n = &dy[n * out_sample..(n + 1) * out_sample];
        for k in 0..g.out_channels {
            let dy_k = &dy_n[k * out_plane..(k + 1) * out_plane];
            for c in 0..g.in_channels {
                let dx_c = &mut dx_n[c * in_plane..(c + 1) * in_plane];
                let w_kc = &weight[(k * g.in_channels + c) * ksize..][..ksize];
                for i in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, g.stride, g.pad, i);
                    for j in 0..g.kw {
                        let wv = w_kc[i * g.kw + j];
                        let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, g.stride, g.pad, j);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + i - g.pad;
                            let row_dy = &dy_k[oy * g.out_w..(oy + 1) * g.out_w];
                            let row_dx = &mut dx_c[iy * g.in_w..(iy + 1) * g.in_w];
                            for ox in ox_lo..ox_hi {
                                row_dx[ox * g.stride + j - g.pad] += wv * row_dy[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let per_filter = g.in_channels * ksize;
    let mut dw = vec![0.0; g.out_channels * per_filter];
    dw.par_chunks_mut(per_filter.max(1)).enumerate().for_each(|(k, dw_k)| {
        for n in 0..g.batch {
            let dy_k = &dy[n * out_sample + k * out_plane..][..out_plane];
            let x_n = &x[n * in_sample..(n + 1) * in_sample];
            for c in 0..g.in_channels {
                let x_c = &x_n[c * in_plane..(c + 1) * in_plane];
                for i in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.out_h, g.in_h, g.stride, g.pad, i);
                    for j in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_range(g.out_w, g.in_w, g.stride, g.pad, j);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + i - g.pad;
                            let row_dy = &dy_k[oy * g.out_w..(oy + 1) * g.out_w];
                            let row_x = &x_c[iy * g.in_w..(iy + 1) * g.in_w];
                            for ox in ox_lo..ox_hi {
                                acc += row_dy[ox] * row_x[ox * g.stride + j - g.pad];
                            }
                        }
                        dw_k[c * ksize + i * g.kw + j] += acc;
                    }
                }
            }
        }
    });

    let mut db = vec![0.0; g.out_channels];
    for n in 0..g.batch {
        for (k, d) in db.iter_mut().enumerate() {
            *d += dy[n * out_sample + k * out_plane..][..out_plane].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Non-overlapping max pooling with a `kh`×`kw` window; trailing rows and
/// columns that do not fill a window are dropped. Returns the pooled values
/// and, for each, the flat input index of the winning element (first maximum
/// in row-major window order).
pub fn maxpool_forward(x: &[f64], shape: &[usize], kh: usize, kw: usize) -> (Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / kh, w / kw);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oy * kh * w + ox * kw;
                for i in 0..kh {
                    for j in 0..kw {
                        let idx = base + (oy * kh + i) * w + ox * kw + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn linear_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * out_dim];
    y.par_chunks_mut(out_dim.max(1)).enumerate().for_each(|(n, y_n)| {
        let x_n = &x[n * in_dim..(n + 1) * in_dim];
        for (o, y_o) in y_n.iter_mut().enumerate() {
            let w_o = &weight[o * in_dim..(o + 1) * in_dim];
            *y_o = bias[o] + x_n.iter().zip(w_o).map(|(a, b)| a * b).sum::<f64>();
        }
    });
    y
}

pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; batch * in_dim];
    dx.par_chunks_mut(in_dim.max(1)).enumerate().for_each(|(n, dx_n)| {
        for o in 0..out_dim {
            let g = dy[n * out_dim + o];
            if g == 0.0 {
                continue;
            }
            for (d, w) in dx_n.iter_mut().zip(&weight[o * in_dim..(o + 1) * in_dim]) {
                *d += g * w;
            }
        }
    });
    let mut dw = vec![0.0; out_dim * in_dim];
    dw.par_chunks_mut(in_dim.max(1)).enumerate().for_each(|(o, dw_o)| {
        for n in 0..batch {
            let g = dy[n * out_dim + o];
            if g == 0.0 {
                continue;
            }
            for (d, v) in dw_o.iter_mut().zip(&x[n * in_dim..(n + 1) * in_dim]) {
                *d += g * v;
            }
        }
    });
    let mut db = vec![0.0; out_dim];
    for n in 0..batch {
        for (d, g) in db.iter_mut().zip(&dy[n * out_dim..(n + 1) * out_dim]) {
            *d += g;
        }
    }
    (dx, dw, db)
}
