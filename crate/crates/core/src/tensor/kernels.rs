//! Raw numeric kernels shared by tape forward and backward passes.
//!
//! All buffers are row-major slices; shapes are passed alongside. Loops are
//! ordered so the innermost dimension walks contiguous memory, which is what
//! lets LLVM vectorize them.

use super::Scalar;

/// `out = a[m,k] * b[k,n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

pub fn matmul_alloc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul(a, b, m, k, n, &mut out);
    out
}

/// `out[c,r] = a[r,c]` for an `[rows, cols]` matrix.
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Softmax over the trailing axis of length `l`, max-stabilized. A length-1
/// axis yields exactly one.
pub fn softmax_rows<S: Scalar>(x: &[S], l: usize, out: &mut [S]) {
    for (row, out_row) in x.chunks_exact(l).zip(out.chunks_exact_mut(l)) {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut sum = S::zero();
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// Conv2d geometry: output spatial extent for one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one image `[c, h, w]` into a `[c*k*k, oh*ow]` patch matrix.
pub fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [S],
) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let mut row = 0usize;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[ohi * ow..(ohi + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        for d in dst_row.iter_mut() {
                            *d = S::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (owi, d) in dst_row.iter_mut().enumerate() {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            S::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a `[c*k*k, oh*ow]` patch-gradient matrix back onto the input
/// gradient `[c, h, w]`. Inverse map of [`im2col`].
pub fn col2im_add<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gx: &mut [S],
) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    let mut row = 0usize;
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let src_row = &src[ohi * ow..(ohi + 1) * ow];
                    for (owi, &s) in src_row.iter().enumerate() {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst_row[iw as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-group mean and variance (population) of `[b, c, h, w]` data.
/// Returns `(mean, var)` each of length `b * groups`.
pub fn group_stats<S: Scalar>(
    x: &[S],
    b: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<S>, Vec<S>) {
    let cg = c / groups;
    let gsize = S::from_f64((cg * hw) as f64);
    let mut mean = vec![S::zero(); b * groups];
    let mut var = vec![S::zero(); b * groups];
    for bi in 0..b {
        for g in 0..groups {
            let start = (bi * c + g * cg) * hw;
            let slice = &x[start..start + cg * hw];
            let mut m = S::zero();
            for &v in slice {
                m += v;
            }
            m /= gsize;
            let mut vv = S::zero();
            for &v in slice {
                let d = v - m;
                vv += d * d;
            }
            vv /= gsize;
            mean[bi * groups + g] = m;
            var[bi * groups + g] = vv;
        }
    }
    (mean, var)
}
