//! Slice-level forward and backward kernels.
//!
//! Layouts are channel-last: sequences are `[batch, length, channels]`,
//! conv kernels are `[k, in_channels, filters]`, dense weights are
//! `[m_in, m_out]`. Every reduction runs in a fixed sequential order so the
//! results do not depend on how callers batch their data.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub length: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub filters: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        self.length + 1 - self.kernel
    }
}

/// `out[b,t,j] = Σ_{a,c} x[b,t+a,c]·w[a,c,j] (+ bias[j])`.
///
/// Row `t` of the im2col matrix is the contiguous slice `x[b, t..t+k, :]`,
/// so each batch element is a single strided GEMM.
pub fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: ConvDims, out: &mut [T]) {
    let t_out = d.out_len();
    let kc = d.kernel * d.in_ch;
    for b in 0..d.batch {
        let xb = &x[b * d.length * d.in_ch..(b + 1) * d.length * d.in_ch];
        let ob = &mut out[b * t_out * d.filters..(b + 1) * t_out * d.filters];
        T::gemm(
            t_out,
            kc,
            d.filters,
            xb,
            (d.in_ch, 1),
            w,
            (d.filters, 1),
            T::zero(),
            ob,
            (d.filters, 1),
        );
        if let Some(bias) = bias {
            for row in ob.chunks_exact_mut(d.filters) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
    }
}

/// Accumulates kernel, bias and (optionally) input gradients.
pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    d: ConvDims,
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let t_out = d.out_len();
    let kc = d.kernel * d.in_ch;
    let go_len = t_out * d.filters;
    if let Some(gw) = grad_w {
        for b in 0..d.batch {
            let xb = &x[b * d.length * d.in_ch..(b + 1) * d.length * d.in_ch];
            let gob = &grad_out[b * go_len..(b + 1) * go_len];
            T::gemm(
                kc,
                t_out,
                d.filters,
                xb,
                (1, d.in_ch),
                gob,
                (d.filters, 1),
                T::one(),
                gw,
                (d.filters, 1),
            );
        }
    }
    if let Some(gb) = grad_bias {
        for row in grad_out.chunks_exact(d.filters) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    if let Some(gx) = grad_x {
        let mut patches = vec![T::zero(); t_out * kc];
        for b in 0..d.batch {
            let gob = &grad_out[b * go_len..(b + 1) * go_len];
            T::gemm(
                t_out,
                d.filters,
                kc,
                gob,
                (d.filters, 1),
                w,
                (1, d.filters),
                T::zero(),
                &mut patches,
                (kc, 1),
            );
            let gxb = &mut gx[b * d.length * d.in_ch..(b + 1) * d.length * d.in_ch];
            for (t, prow) in patches.chunks_exact(kc).enumerate() {
                let dst = &mut gxb[t * d.in_ch..t * d.in_ch + kc];
                for (g, &p) in dst.iter_mut().zip(prow) {
                    *g += p;
                }
            }
        }
    }
}

pub fn pool_out_len(length: usize, size: usize, stride: usize) -> usize {
    (length - size) / stride + 1
}

pub fn avgpool_forward<T: Scalar>(x: &[T], batch: usize, length: usize, ch: usize, size: usize, stride: usize, out: &mut [T]) {
    let t_out = pool_out_len(length, size, stride);
    let scale = T::one() / T::from_usize(size).unwrap();
    for b in 0..batch {
        let xb = &x[b * length * ch..];
        let ob = &mut out[b * t_out * ch..(b + 1) * t_out * ch];
        for t in 0..t_out {
            let orow = &mut ob[t * ch..(t + 1) * ch];
            orow.copy_from_slice(&xb[t * stride * ch..(t * stride + 1) * ch]);
            for i in 1..size {
                let src = &xb[(t * stride + i) * ch..(t * stride + i + 1) * ch];
                for (o, &v) in orow.iter_mut().zip(src) {
                    *o += v;
                }
            }
            for o in orow.iter_mut() {
                *o *= scale;
            }
        }
    }
}

pub fn avgpool_backward<T: Scalar>(grad_out: &[T], batch: usize, length: usize, ch: usize, size: usize, stride: usize, grad_x: &mut [T]) {
    let t_out = pool_out_len(length, size, stride);
    let scale = T::one() / T::from_usize(size).unwrap();
    for b in 0..batch {
        let gob = &grad_out[b * t_out * ch..(b + 1) * t_out * ch];
        let gxb = &mut grad_x[b * length * ch..(b + 1) * length * ch];
        for t in 0..t_out {
            let grow = &gob[t * ch..(t + 1) * ch];
            for i in 0..size {
                let dst = &mut gxb[(t * stride + i) * ch..(t * stride + i + 1) * ch];
                for (g, &v) in dst.iter_mut().zip(grow) {
                    *g += v * scale;
                }
            }
        }
    }
}

/// Per-feature batch statistics over all rows (population variance).
/// Accumulates in f64.
pub fn feature_moments<T: Scalar>(x: &[T], features: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / features;
    let mut mean = vec![0.0f64; features];
    for row in x.chunks_exact(features) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0f64; features];
    for row in x.chunks_exact(features) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= rows as f64;
    }
    (mean, var)
}

/// Backward of `y = gamma·xhat + beta` with `xhat` from batch statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_backward<T: Scalar>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    features: usize,
    grad_x: Option<&mut [T]>,
    grad_gamma: Option<&mut [T]>,
    grad_beta: Option<&mut [T]>,
) {
    let rows = grad_out.len() / features;
    let mut sum_dy = vec![0.0f64; features];
    let mut sum_dy_xhat = vec![0.0f64; features];
    for (grow, xrow) in grad_out.chunks_exact(features).zip(xhat.chunks_exact(features)) {
        for f in 0..features {
            let g = grow[f].as_f64();
            sum_dy[f] += g;
            sum_dy_xhat[f] += g * xrow[f].as_f64();
        }
    }
    if let Some(gg) = grad_gamma {
        for (g, &s) in gg.iter_mut().zip(&sum_dy_xhat) {
            *g += T::from_f64_lossy(s);
        }
    }
    if let Some(gb) = grad_beta {
        for (g, &s) in gb.iter_mut().zip(&sum_dy) {
            *g += T::from_f64_lossy(s);
        }
    }
    if let Some(gx) = grad_x {
        let n = rows as f64;
        let mean_dy: Vec<f64> = sum_dy.iter().map(|s| s / n).collect();
        let mean_dy_xhat: Vec<f64> = sum_dy_xhat.iter().map(|s| s / n).collect();
        for ((gxrow, grow), xrow) in gx
            .chunks_exact_mut(features)
            .zip(grad_out.chunks_exact(features))
            .zip(xhat.chunks_exact(features))
        {
            for f in 0..features {
                let scale = gamma[f].as_f64() * inv_std[f].as_f64();
                let v = scale * (grow[f].as_f64() - mean_dy[f] - xrow[f].as_f64() * mean_dy_xhat[f]);
                gxrow[f] += T::from_f64_lossy(v);
            }
        }
    }
}

/// `y = x·W + b` for `x: [rows, m_in]`, `W: [m_in, m_out]`.
pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], rows: usize, m_in: usize, m_out: usize, out: &mut [T]) {
    for row in out.chunks_exact_mut(m_out) {
        row.copy_from_slice(bias);
    }
    T::gemm(rows, m_in, m_out, x, (m_in, 1), w, (m_out, 1), T::one(), out, (m_out, 1));
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    rows: usize,
    m_in: usize,
    m_out: usize,
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    if let Some(gw) = grad_w {
        T::gemm(m_in, rows, m_out, x, (1, m_in), grad_out, (m_out, 1), T::one(), gw, (m_out, 1));
    }
    if let Some(gb) = grad_b {
        for row in grad_out.chunks_exact(m_out) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    if let Some(gx) = grad_x {
        T::gemm(rows, m_out, m_in, grad_out, (m_out, 1), w, (1, m_out), T::one(), gx, (m_in, 1));
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (src, dst) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = 0.0f64;
        for (d, &s) in dst.iter_mut().zip(src) {
            let e = (s - max).as_f64().exp();
            sum += e;
            *d = T::from_f64_lossy(e);
        }
        for d in dst.iter_mut() {
            *d = T::from_f64_lossy(d.as_f64() / sum);
        }
    }
    out
}
