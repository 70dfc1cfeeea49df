//! Raw compute loops shared by forward evaluation and adjoints.
//!
//! Every kernel accumulates into its output slice (`+=`) so batched and
//! shared-operand adjoints compose without temporaries. Reduction order is
//! fixed per output element, which keeps results bitwise identical no matter
//! how the outer loops are split across threads.

use crate::scalar::Scalar;
use std::sync::OnceLock;

/// Thread cap from UFORMER_THREADS (0 or unset means single-threaded).
pub fn thread_cap() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("UFORMER_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .map(|n| n.max(1))
            .unwrap_or(1)
    })
}

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn mm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Batched matmul. `a` is [batch, m, k]; `b` is [k-or-n rows...] shared when
/// `b_batched` is false, else [batch, ...]. Splits batches across threads
/// when UFORMER_THREADS allows; outputs are disjoint so the result is
/// identical either way.
#[allow(clippy::too_many_arguments)]
pub fn mm_batched<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    transpose_b: bool,
) {
    let a_sz = m * k;
    let b_sz = k * n;
    let o_sz = m * n;
    let run = |range: std::ops::Range<usize>, out_chunk: &mut [S]| {
        for (ci, i) in range.enumerate() {
            let a_i = &a[i * a_sz..(i + 1) * a_sz];
            let b_i = if b_batched {
                &b[i * b_sz..(i + 1) * b_sz]
            } else {
                b
            };
            let o_i = &mut out_chunk[ci * o_sz..(ci + 1) * o_sz];
            if transpose_b {
                mm_nt(a_i, b_i, o_i, m, k, n);
            } else {
                mm_nn(a_i, b_i, o_i, m, k, n);
            }
        }
    };
    let threads = thread_cap().min(batch.max(1));
    if threads <= 1 || batch <= 1 {
        run(0..batch, out);
        return;
    }
    let per = batch.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut rest = &mut out[..];
        let mut start = 0;
        while start < batch {
            let count = per.min(batch - start);
            let (chunk, tail) = rest.split_at_mut(count * o_sz);
            rest = tail;
            let range = start..start + count;
            scope.spawn(move || run(range, chunk));
            start += count;
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Valid kernel-tap range for one output coordinate: taps `k` with
/// `0 <= o*stride + k - pad < extent`.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let base = o * stride;
    let lo = pad.saturating_sub(base);
    let hi = k.min((extent + pad).saturating_sub(base));
    (lo.min(hi), hi)
}

/// Cross-correlation (no kernel flip). x: [cin,h,w], w: [cout,cin/g,kh,kw].
/// Valid tap ranges are hoisted so the inner loops are branch-free.
pub fn conv2d_forward<S: Scalar>(x: &[S], weight: &[S], geom: &ConvGeom, out: &mut [S]) {
    let cpg_in = geom.cin / geom.groups;
    let cpg_out = geom.cout / geom.groups;
    for co in 0..geom.cout {
        let g = co / cpg_out;
        for oh in 0..geom.h_out {
            let (kh_lo, kh_hi) = tap_range(oh, geom.stride, geom.pad, geom.kh, geom.h);
            for ow in 0..geom.w_out {
                let (kw_lo, kw_hi) = tap_range(ow, geom.stride, geom.pad, geom.kw, geom.w);
                let mut acc = S::ZERO;
                for cl in 0..cpg_in {
                    let ci = g * cpg_in + cl;
                    let x_c = &x[ci * geom.h * geom.w..(ci + 1) * geom.h * geom.w];
                    let w_c = &weight[(co * cpg_in + cl) * geom.kh * geom.kw
                        ..(co * cpg_in + cl + 1) * geom.kh * geom.kw];
                    for kh in kh_lo..kh_hi {
                        let ih = oh * geom.stride + kh - geom.pad;
                        let row = &x_c[ih * geom.w..];
                        let w_row = &w_c[kh * geom.kw..];
                        let base = ow * geom.stride;
                        for kw in kw_lo..kw_hi {
                            acc += row[base + kw - geom.pad] * w_row[kw];
                        }
                    }
                }
                out[(co * geom.h_out + oh) * geom.w_out + ow] += acc;
            }
        }
    }
}

#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward_x<S: Scalar>(dy: &[S], weight: &[S], geom: &ConvGeom, dx: &mut [S]) {
    let cpg_in = geom.cin / geom.groups;
    let cpg_out = geom.cout / geom.groups;
    for co in 0..geom.cout {
        let g = co / cpg_out;
        for oh in 0..geom.h_out {
            let (kh_lo, kh_hi) = tap_range(oh, geom.stride, geom.pad, geom.kh, geom.h);
            for ow in 0..geom.w_out {
                let (kw_lo, kw_hi) = tap_range(ow, geom.stride, geom.pad, geom.kw, geom.w);
                let gy = dy[(co * geom.h_out + oh) * geom.w_out + ow];
                for cl in 0..cpg_in {
                    let ci = g * cpg_in + cl;
                    let w_c = &weight[(co * cpg_in + cl) * geom.kh * geom.kw..];
                    for kh in kh_lo..kh_hi {
                        let ih = oh * geom.stride + kh - geom.pad;
                        let dst = &mut dx[(ci * geom.h + ih) * geom.w..];
                        let w_row = &w_c[kh * geom.kw..];
                        let base = ow * geom.stride;
                        for kw in kw_lo..kw_hi {
                            dst[base + kw - geom.pad] += gy * w_row[kw];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward_w<S: Scalar>(dy: &[S], x: &[S], geom: &ConvGeom, dw: &mut [S]) {
    let cpg_in = geom.cin / geom.groups;
    let cpg_out = geom.cout / geom.groups;
    for co in 0..geom.cout {
        let g = co / cpg_out;
        for cl in 0..cpg_in {
            let ci = g * cpg_in + cl;
            let x_c = &x[ci * geom.h * geom.w..];
            for kh in 0..geom.kh {
                for kw in 0..geom.kw {
                    // valid outputs: 0 <= o*stride + k - pad < extent
                    let out_range = |k: usize, extent: usize, count: usize| -> (usize, usize) {
                        let lo = if geom.pad > k {
                            (geom.pad - k).div_ceil(geom.stride)
                        } else {
                            0
                        };
                        let hi = if extent + geom.pad > k {
                            count.min((extent + geom.pad - k - 1) / geom.stride + 1)
                        } else {
                            0
                        };
                        (lo.min(hi), hi)
                    };
                    let (oh_lo, oh_hi) = out_range(kh, geom.h, geom.h_out);
                    let (ow_lo, ow_hi) = out_range(kw, geom.w, geom.w_out);
                    let mut acc = S::ZERO;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * geom.stride + kh - geom.pad;
                        let row = &x_c[ih * geom.w..];
                        let dy_row = &dy[(co * geom.h_out + oh) * geom.w_out..];
                        for ow in ow_lo..ow_hi {
                            let iw = ow * geom.stride + kw - geom.pad;
                            acc += dy_row[ow] * row[iw];
                        }
                    }
                    dw[((co * cpg_in + cl) * geom.kh + kh) * geom.kw + kw] += acc;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Transposed convolution. x: [cin,h,w], w: [cin,cout,kh,kw] (torch layout).
pub fn convt2d_forward<S: Scalar>(x: &[S], weight: &[S], geom: &ConvTGeom, out: &mut [S]) {
    for ci in 0..geom.cin {
        let x_c = &x[ci * geom.h * geom.w..];
        for co in 0..geom.cout {
            let w_c = &weight[(ci * geom.cout + co) * geom.kh * geom.kw..];
            for ih in 0..geom.h {
                for iw in 0..geom.w {
                    let xv = x_c[ih * geom.w + iw];
                    for kh in 0..geom.kh {
                        let oh = ih * geom.stride + kh;
                        for kw in 0..geom.kw {
                            let ow = iw * geom.stride + kw;
                            out[(co * geom.h_out + oh) * geom.w_out + ow] +=
                                xv * w_c[kh * geom.kw + kw];
                        }
                    }
                }
            }
        }
    }
}

pub fn convt2d_backward_x<S: Scalar>(dy: &[S], weight: &[S], geom: &ConvTGeom, dx: &mut [S]) {
    for ci in 0..geom.cin {
        for co in 0..geom.cout {
            let w_c = &weight[(ci * geom.cout + co) * geom.kh * geom.kw..];
            for ih in 0..geom.h {
                for iw in 0..geom.w {
                    let mut acc = S::ZERO;
                    for kh in 0..geom.kh {
                        let oh = ih * geom.stride + kh;
                        for kw in 0..geom.kw {
                            let ow = iw * geom.stride + kw;
                            acc += dy[(co * geom.h_out + oh) * geom.w_out + ow]
                                * w_c[kh * geom.kw + kw];
                        }
                    }
                    dx[(ci * geom.h + ih) * geom.w + iw] += acc;
                }
            }
        }
    }
}

pub fn convt2d_backward_w<S: Scalar>(dy: &[S], x: &[S], geom: &ConvTGeom, dw: &mut [S]) {
    for ci in 0..geom.cin {
        let x_c = &x[ci * geom.h * geom.w..];
        for co in 0..geom.cout {
            for kh in 0..geom.kh {
                for kw in 0..geom.kw {
                    let mut acc = S::ZERO;
                    for ih in 0..geom.h {
                        let oh = ih * geom.stride + kh;
                        for iw in 0..geom.w {
                            let ow = iw * geom.stride + kw;
                            acc += x_c[ih * geom.w + iw]
                                * dy[(co * geom.h_out + oh) * geom.w_out + ow];
                        }
                    }
                    dw[((ci * geom.cout + co) * geom.kh + kh) * geom.kw + kw] += acc;
                }
            }
        }
    }
}

/// Numerically careful sum: perfect binary splitting. Sums of 2^k equal
/// values stay exact, which the loss anchor tests rely on.
pub fn pairwise_sum<S: Scalar>(xs: &[S]) -> S {
    match xs.len() {
        0 => S::ZERO,
        1 => xs[0],
        2 => xs[0] + xs[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_matches_triple_loop() {
        // 2x3 * 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0f64; 4];
        mm_nn(&a, &b, &mut out, 2, 3, 2);
        let mut expect = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expect[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        assert_eq!(out, expect);
    }

    #[test]
    fn mm_variants_are_consistent() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut c_nn = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c_nn, m, k, n);

        // b transposed into [n,k] then mm_nt must agree
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c_nt, m, k, n);
        assert_eq!(c_nn, c_nt);

        // a transposed into [k,m] then mm_tn(aT as [m',k'] with roles swapped)
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c_tn = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c_tn, k, m, n);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn pairwise_sum_of_equal_values_is_exact_for_pow2() {
        let e = 0.001f64;
        let xs = vec![e; 64];
        assert_eq!(pairwise_sum(&xs), 64.0 * e);
        assert_eq!(pairwise_sum(&xs) / 64.0, e);
    }

    #[test]
    fn batched_matmul_is_thread_invariant() {
        let batch = 5;
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..batch * m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut out1 = vec![0.0; batch * m * n];
        mm_batched(&a, &b, &mut out1, batch, m, k, n, false, false);
        let mut out2 = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm_nn(
                &a[i * m * k..(i + 1) * m * k],
                &b,
                &mut out2[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        assert_eq!(out1, out2);
    }
}
