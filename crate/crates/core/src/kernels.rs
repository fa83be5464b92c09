//! Raw numeric kernels behind the tape ops.
//!
//! Layout conventions: activations are NHWC, convolution kernels are
//! `kh x kw x cin x cout`, matrices are row-major. Every kernel accumulates
//! each output element in a fixed index order, and parallelism only ever
//! partitions disjoint output regions, so results are bit-identical for any
//! thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work below this many output elements is not worth a rayon dispatch.
const PAR_THRESHOLD: usize = 16 * 1024;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    /// Leading-edge padding; trailing padding is whatever the output extent implies.
    pub ph: usize,
    pub pw: usize,
    pub sh: usize,
    pub sw: usize,
}

/// out[n,oh,ow,:] = bias + sum_{kh,kw,cin} x[n, oh*sh+kh-ph, ow*sw+kw-pw, cin] * k[kh,kw,cin,:]
pub fn conv2d_fwd<S: Scalar>(d: &ConvDims, x: &[S], k: &[S], bias: &[S], out: &mut [S]) {
    let row_len = d.ow * d.cout;
    let run = |(row, out_row): (usize, &mut [S])| {
        let n = row / d.oh;
        let oh = row % d.oh;
        for ow in 0..d.ow {
            let acc = &mut out_row[ow * d.cout..(ow + 1) * d.cout];
            acc.copy_from_slice(bias);
            for kh in 0..d.kh {
                let ih = (oh * d.sh + kh) as isize - d.ph as isize;
                if ih < 0 || ih >= d.h as isize {
                    continue;
                }
                for kw in 0..d.kw {
                    let iw = (ow * d.sw + kw) as isize - d.pw as isize;
                    if iw < 0 || iw >= d.w as isize {
                        continue;
                    }
                    let xbase = ((n * d.h + ih as usize) * d.w + iw as usize) * d.cin;
                    let kbase = (kh * d.kw + kw) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let xv = x[xbase + ci];
                        let krow = &k[kbase + ci * d.cout..kbase + (ci + 1) * d.cout];
                        for (a, kv) in acc.iter_mut().zip(krow) {
                            *a += xv * *kv;
                        }
                    }
                }
            }
        }
    };
    if out.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len).enumerate().for_each(run);
    } else {
        out.chunks_mut(row_len).enumerate().for_each(run);
    }
}

/// dx[n,ih,iw,ci] = sum over (kh,kw) hitting (ih,iw) of dy[n,oh,ow,:] . k[kh,kw,ci,:]
pub fn conv2d_bwd_x<S: Scalar>(d: &ConvDims, k: &[S], dy: &[S], dx: &mut [S]) {
    let row_len = d.w * d.cin;
    let run = |(row, dx_row): (usize, &mut [S])| {
        let n = row / d.h;
        let ih = row % d.h;
        for iw in 0..d.w {
            let acc = &mut dx_row[iw * d.cin..(iw + 1) * d.cin];
            for kh in 0..d.kh {
                let oh_num = ih as isize + d.ph as isize - kh as isize;
                if oh_num < 0 || oh_num % d.sh as isize != 0 {
                    continue;
                }
                let oh = (oh_num / d.sh as isize) as usize;
                if oh >= d.oh {
                    continue;
                }
                for kw in 0..d.kw {
                    let ow_num = iw as isize + d.pw as isize - kw as isize;
                    if ow_num < 0 || ow_num % d.sw as isize != 0 {
                        continue;
                    }
                    let ow = (ow_num / d.sw as isize) as usize;
                    if ow >= d.ow {
                        continue;
                    }
                    let dybase = ((n * d.oh + oh) * d.ow + ow) * d.cout;
                    let kbase = (kh * d.kw + kw) * d.cin * d.cout;
                    let dyrow = &dy[dybase..dybase + d.cout];
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let krow = &k[kbase + ci * d.cout..kbase + (ci + 1) * d.cout];
                        let mut s = S::zero();
                        for (dv, kv) in dyrow.iter().zip(krow) {
                            s += *dv * *kv;
                        }
                        *a += s;
                    }
                }
            }
        }
    };
    if dx.len() >= PAR_THRESHOLD {
        dx.par_chunks_mut(row_len).enumerate().for_each(run);
    } else {
        dx.chunks_mut(row_len).enumerate().for_each(run);
    }
}

/// dk[kh,kw,ci,co] = sum_{n,oh,ow} x[n, oh*sh+kh-ph, ow*sw+kw-pw, ci] * dy[n,oh,ow,co]
pub fn conv2d_bwd_k<S: Scalar>(d: &ConvDims, x: &[S], dy: &[S], dk: &mut [S]) {
    let tap_len = d.cin * d.cout;
    // One chunk per (kh, kw) tap; each accumulates over n,oh,ow in order.
    dk.par_chunks_mut(tap_len).enumerate().for_each(|(tap, dk_tap)| {
        let kh = tap / d.kw;
        let kw = tap % d.kw;
        for n in 0..d.n {
            for oh in 0..d.oh {
                let ih = (oh * d.sh + kh) as isize - d.ph as isize;
                if ih < 0 || ih >= d.h as isize {
                    continue;
                }
                for ow in 0..d.ow {
                    let iw = (ow * d.sw + kw) as isize - d.pw as isize;
                    if iw < 0 || iw >= d.w as isize {
                        continue;
                    }
                    let xbase = ((n * d.h + ih as usize) * d.w + iw as usize) * d.cin;
                    let dybase = ((n * d.oh + oh) * d.ow + ow) * d.cout;
                    let dyrow = &dy[dybase..dybase + d.cout];
                    for ci in 0..d.cin {
                        let xv = x[xbase + ci];
                        let acc = &mut dk_tap[ci * d.cout..(ci + 1) * d.cout];
                        for (a, dv) in acc.iter_mut().zip(dyrow) {
                            *a += xv * *dv;
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_bwd_b<S: Scalar>(d: &ConvDims, dy: &[S], db: &mut [S]) {
    for row in dy.chunks_exact(d.cout) {
        for (a, dv) in db.iter_mut().zip(row) {
            *a += *dv;
        }
    }
}

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    let run = |(i, out_row): (usize, &mut [S])| {
        for k0 in 0..k {
            let av = a[i * k + k0];
            if av == S::zero() {
                continue;
            }
            let brow = &b[k0 * n..(k0 + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    };
    if m * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(run);
    } else {
        out.chunks_mut(n).enumerate().for_each(run);
    }
}

/// dA[i,k] += sum_j dY[i,j] * B[k,j]
pub fn matmul_bwd_a<S: Scalar>(m: usize, k: usize, n: usize, b: &[S], dy: &[S], da: &mut [S]) {
    let run = |(i, da_row): (usize, &mut [S])| {
        let dyrow = &dy[i * n..(i + 1) * n];
        for (k0, a) in da_row.iter_mut().enumerate() {
            let brow = &b[k0 * n..(k0 + 1) * n];
            let mut s = S::zero();
            for (dv, bv) in dyrow.iter().zip(brow) {
                s += *dv * *bv;
            }
            *a += s;
        }
    };
    if m * k >= PAR_THRESHOLD {
        da.par_chunks_mut(k).enumerate().for_each(run);
    } else {
        da.chunks_mut(k).enumerate().for_each(run);
    }
}

/// dB[k,j] += sum_i A[i,k] * dY[i,j]
pub fn matmul_bwd_b<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], dy: &[S], db: &mut [S]) {
    let run = |(k0, db_row): (usize, &mut [S])| {
        for i in 0..m {
            let av = a[i * k + k0];
            if av == S::zero() {
                continue;
            }
            let dyrow = &dy[i * n..(i + 1) * n];
            for (o, dv) in db_row.iter_mut().zip(dyrow) {
                *o += av * *dv;
            }
        }
    };
    if k * n >= PAR_THRESHOLD {
        db.par_chunks_mut(n).enumerate().for_each(run);
    } else {
        db.chunks_mut(n).enumerate().for_each(run);
    }
}

/// 2x2 stride-2 max pool. `argmax[out_idx]` records the flat input index of
/// the winning element; the first occurrence in row-major window order wins
/// ties.
pub fn maxpool2_fwd<S: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    x: &[S],
    out: &mut [S],
    argmax: &mut [usize],
) {
    let oh = h / 2;
    let ow = w / 2;
    for ni in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let obase = ((ni * oh + ohi) * ow + owi) * c;
                for ci in 0..c {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let idx = ((ni * h + ohi * 2 + dh) * w + owi * 2 + dw) * c + ci;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + ci] = best;
                    argmax[obase + ci] = best_idx;
                }
            }
        }
    }
}

pub fn maxpool2_bwd<S: Scalar>(argmax: &[usize], dy: &[S], dx: &mut [S]) {
    for (i, &src) in argmax.iter().enumerate() {
        dx[src] += dy[i];
    }
}

/// out[n,c] = mean over (h, w) of x[n,:,:,c]
pub fn gap_fwd<S: Scalar>(n: usize, h: usize, w: usize, c: usize, x: &[S], out: &mut [S]) {
    let inv = S::from_usize(h * w).recip();
    for ni in 0..n {
        let acc = &mut out[ni * c..(ni + 1) * c];
        for row in x[ni * h * w * c..(ni + 1) * h * w * c].chunks_exact(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
}

pub fn gap_bwd<S: Scalar>(n: usize, h: usize, w: usize, c: usize, dy: &[S], dx: &mut [S]) {
    let inv = S::from_usize(h * w).recip();
    for ni in 0..n {
        let dyrow = &dy[ni * c..(ni + 1) * c];
        for row in dx[ni * h * w * c..(ni + 1) * h * w * c].chunks_exact_mut(c) {
            for (a, dv) in row.iter_mut().zip(dyrow) {
                *a += *dv * inv;
            }
        }
    }
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<S: Scalar>(rows: usize, k: usize, x: &[S], out: &mut [S]) {
    for r in 0..rows {
        let xi = &x[r * k..(r + 1) * k];
        let oi = &mut out[r * k..(r + 1) * k];
        let mut m = xi[0];
        for &v in &xi[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for (o, &v) in oi.iter_mut().zip(xi) {
            *o = (v - m).exp();
            sum += *o;
        }
        let inv = sum.recip();
        for o in oi.iter_mut() {
            *o *= inv;
        }
    }
}

/// dz_i = p_i * (dy_i - sum_j dy_j p_j), per row.
pub fn softmax_bwd<S: Scalar>(rows: usize, k: usize, p: &[S], dy: &[S], dx: &mut [S]) {
    for r in 0..rows {
        let pi = &p[r * k..(r + 1) * k];
        let dyi = &dy[r * k..(r + 1) * k];
        let mut dot = S::zero();
        for (pv, dv) in pi.iter().zip(dyi) {
            dot += *pv * *dv;
        }
        let dxi = &mut dx[r * k..(r + 1) * k];
        for ((a, pv), dv) in dxi.iter_mut().zip(pi).zip(dyi) {
            *a += *pv * (*dv - dot);
        }
    }
}

pub struct BatchNormStats<S> {
    pub mean: Vec<S>,
    /// Population variance (divisor m).
    pub var: Vec<S>,
}

/// Per-channel mean and population variance over the N*H*W axis of NHWC data.
pub fn channel_moments<S: Scalar>(rows: usize, c: usize, x: &[S]) -> BatchNormStats<S> {
    let inv_m = S::from_usize(rows).recip();
    let mut mean = vec![S::zero(); c];
    for row in x.chunks_exact(c) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += *v;
        }
    }
    for a in mean.iter_mut() {
        *a *= inv_m;
    }
    let mut var = vec![S::zero(); c];
    for row in x.chunks_exact(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v - *mu;
            *a += d * d;
        }
    }
    for a in var.iter_mut() {
        *a *= inv_m;
    }
    BatchNormStats { mean, var }
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
pub fn batchnorm_apply<S: Scalar>(
    c: usize,
    x: &[S],
    mean: &[S],
    inv_std: &[S],
    gamma: &[S],
    beta: &[S],
    out: &mut [S],
) {
    for (orow, xrow) in out.chunks_exact_mut(c).zip(x.chunks_exact(c)) {
        for ci in 0..c {
            orow[ci] = gamma[ci] * (xrow[ci] - mean[ci]) * inv_std[ci] + beta[ci];
        }
    }
}

/// Training-mode backward: mean/var are functions of x.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_bwd_train<S: Scalar>(
    rows: usize,
    c: usize,
    x: &[S],
    mean: &[S],
    inv_std: &[S],
    gamma: &[S],
    dy: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let inv_m = S::from_usize(rows).recip();
    // Accumulate per-channel sums: sum(dy), sum(dy * xhat).
    let mut sum_dy = vec![S::zero(); c];
    let mut sum_dy_xhat = vec![S::zero(); c];
    for (xrow, dyrow) in x.chunks_exact(c).zip(dy.chunks_exact(c)) {
        for ci in 0..c {
            let xhat = (xrow[ci] - mean[ci]) * inv_std[ci];
            sum_dy[ci] += dyrow[ci];
            sum_dy_xhat[ci] += dyrow[ci] * xhat;
        }
    }
    for ci in 0..c {
        dgamma[ci] += sum_dy_xhat[ci];
        dbeta[ci] += sum_dy[ci];
    }
    // dx_i = gamma * inv_std / m * (m*dy_i - sum(dy) - xhat_i * sum(dy*xhat))
    let m_s = S::from_usize(rows);
    for ((xrow, dyrow), dxrow) in x
        .chunks_exact(c)
        .zip(dy.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        for ci in 0..c {
            let xhat = (xrow[ci] - mean[ci]) * inv_std[ci];
            let t = m_s * dyrow[ci] - sum_dy[ci] - xhat * sum_dy_xhat[ci];
            dxrow[ci] += gamma[ci] * inv_std[ci] * inv_m * t;
        }
    }
}

/// Inference-mode backward: running stats are constants, the map is affine.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_bwd_infer<S: Scalar>(
    c: usize,
    x: &[S],
    mean: &[S],
    inv_std: &[S],
    gamma: &[S],
    dy: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    for ((xrow, dyrow), dxrow) in x
        .chunks_exact(c)
        .zip(dy.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
    {
        for ci in 0..c {
            let xhat = (xrow[ci] - mean[ci]) * inv_std[ci];
            dgamma[ci] += dyrow[ci] * xhat;
            dbeta[ci] += dyrow[ci];
            dxrow[ci] += dyrow[ci] * gamma[ci] * inv_std[ci];
        }
    }
}
