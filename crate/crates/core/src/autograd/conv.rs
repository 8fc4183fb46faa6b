//! Same-padded 1-D cross-correlation over `[batch, channels, length]` inputs.
//!
//! Each sample is copied once into a zero-padded, position-major buffer
//! (`buf[p·C + c]`). In that layout the im2col matrix, with rows ordered
//! tap-major (`row = tap·C + c`), is a strided view with row stride 1 and
//! column stride `C`, so every convolution is a single GEMM per sample with
//! no lowering copy. The input gradient is the same correlation applied to the
//! output gradient with transposed, tap-reversed kernels and mirrored padding.
//! Work is split across samples; weight gradients are reduced from fixed-size
//! sample chunks in index order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::gemm::{gemm_view, View};

/// Samples per weight-gradient partial sum.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub len: usize,
}

impl ConvDims {
    /// Left padding for "same" output length; even kernels pad one less on the left.
    pub fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// Writes `x` (`[channels, len]`) into `buf` as `[(len + kernel − 1), channels]`
/// with `pad` zero positions in front.
fn pad_transposed(x: &[f64], channels: usize, len: usize, kernel: usize, pad: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.resize((len + kernel - 1) * channels, 0.0);
    for c in 0..channels {
        for (p, v) in x[c * len..(c + 1) * len].iter().enumerate() {
            buf[(p + pad) * channels + c] = *v;
        }
    }
}

/// `out = w2 · cols + beta · out` for one sample, `w2` being `[c_out, kernel·c_in]`
/// in tap-major column order.
fn correlate(c_in: usize, c_out: usize, kernel: usize, len: usize, w2: &[f64], buf: &[f64], out: &mut [f64]) {
    let rows = c_in * kernel;
    let a = View {
        data: w2,
        rs: rows,
        cs: 1,
    };
    let cols = View {
        data: buf,
        rs: 1,
        cs: c_in,
    };
    gemm_view(c_out, rows, len, a, cols, 0.0, out);
}

/// `[c_out, c_in, k]` → `[c_out, k·c_in]` with column `tap·c_in + ci`.
fn tap_major(d: &ConvDims, w: &[f64]) -> Vec<f64> {
    let (k, rows) = (d.kernel, d.rows());
    let mut out = vec![0.0; d.c_out * rows];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for t in 0..k {
                out[co * rows + t * d.c_in + ci] = w[(co * d.c_in + ci) * k + t];
            }
        }
    }
    out
}

pub(crate) fn forward(d: &ConvDims, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let l = d.len;
    let w2 = tap_major(d, w);
    let mut out = vec![0.0; d.batch * d.c_out * l];
    out.par_chunks_mut(d.c_out * l)
        .zip(x.par_chunks(d.c_in * l))
        .for_each_init(Vec::new, |buf, (out_b, x_b)| {
            pad_transposed(x_b, d.c_in, l, d.kernel, d.pad_left(), buf);
            correlate(d.c_in, d.c_out, d.kernel, l, &w2, buf, out_b);
            if let Some(b) = b {
                for (co, row) in out_b.chunks_mut(l).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

pub(crate) fn backward_input(d: &ConvDims, w: &[f64], dout: &[f64]) -> Vec<f64> {
    let (k, l) = (d.kernel, d.len);
    // dx[ci, p] = Σ_co Σ_t w[co, ci, k−1−t] · dout[co, p + t − (k−1−pad)]
    let mut wf = vec![0.0; d.c_in * d.c_out * k];
    for ci in 0..d.c_in {
        for t in 0..k {
            for co in 0..d.c_out {
                wf[(ci * k + t) * d.c_out + co] = w[(co * d.c_in + ci) * k + (k - 1 - t)];
            }
        }
    }
    let pad = k - 1 - d.pad_left();
    let mut dx = vec![0.0; d.batch * d.c_in * l];
    dx.par_chunks_mut(d.c_in * l)
        .zip(dout.par_chunks(d.c_out * l))
        .for_each_init(Vec::new, |buf, (dx_b, dout_b)| {
            pad_transposed(dout_b, d.c_out, l, k, pad, buf);
            correlate(d.c_out, d.c_in, k, l, &wf, buf, dx_b);
        });
    dx
}

/// Returns `(d_weight, d_bias)`.
pub(crate) fn backward_params(d: &ConvDims, x: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (k, l, rows) = (d.kernel, d.len, d.rows());
    let wlen = d.c_out * rows;
    let partials: Vec<Vec<f64>> = x
        .par_chunks(d.c_in * l * GRAD_CHUNK)
        .zip(dout.par_chunks(d.c_out * l * GRAD_CHUNK))
        .map(|(xs, douts)| {
            let mut dw2 = vec![0.0; wlen];
            let mut buf = Vec::new();
            for (x_b, dout_b) in xs.chunks(d.c_in * l).zip(douts.chunks(d.c_out * l)) {
                pad_transposed(x_b, d.c_in, l, k, d.pad_left(), &mut buf);
                let a = View {
                    data: dout_b,
                    rs: l,
                    cs: 1,
                };
                let cols_t = View {
                    data: &buf,
                    rs: d.c_in,
                    cs: 1,
                };
                gemm_view(d.c_out, l, rows, a, cols_t, 1.0, &mut dw2);
            }
            dw2
        })
        .collect();
    let mut dw2 = vec![0.0; wlen];
    for p in &partials {
        dw2.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let mut dw = vec![0.0; wlen];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            for t in 0..k {
                dw[(co * d.c_in + ci) * k + t] = dw2[co * rows + t * d.c_in + ci];
            }
        }
    }
    let mut db = vec![0.0; d.c_out];
    for dout_b in dout.chunks(d.c_out * l) {
        for (co, row) in dout_b.chunks(l).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    (dw, db)
}

/// Reverses every kernel along its tap axis.
pub(crate) fn flip_taps(d: &ConvDims, w: &[f64]) -> Vec<f64> {
    let mut out = w.to_vec();
    for row in out.chunks_mut(d.kernel) {
        row.reverse();
    }
    out
}
