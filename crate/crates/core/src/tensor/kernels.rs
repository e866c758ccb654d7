//! Flat-slice numeric kernels shared by the tape ops and the forward-only
//! helpers. Loop orders are chosen so the innermost loop runs over
//! contiguous memory and autovectorizes.

// The three matmul kernels are compiled twice: once for the baseline
// target and once with AVX2+FMA enabled, picked once at runtime. The
// bodies are shared through #[inline(always)] helpers so both versions
// stay identical instruction-for-instruction apart from vectorization.

macro_rules! dispatch_simd {
    ($generic:ident, $avx2:ident, ($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                return unsafe { $avx2($($arg),*) };
            }
        }
        $generic($($arg),*)
    }};
}

#[inline(always)]
fn matmul_acc_body(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

fn matmul_acc_generic(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc_body(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_acc_avx2(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_acc_body(a, b, out, m, k, n);
}

/// out[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    dispatch_simd!(matmul_acc_generic, matmul_acc_avx2, (a, b, out, m, k, n))
}

/// out[m x n] = a[m x k] * b[k x n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out[n x m] = transpose of x[m x n]
pub fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// out[m x k] += d[m x n] * b^T where b is [k x n].
/// Transposing b first keeps the hot loop in the fast accumulate kernel.
pub fn matmul_bt_acc(d: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    let bt = transpose(b, k, n);
    matmul_acc(d, &bt, out, m, n, k);
}

/// out[k x n] += a^T * d where a is [m x k], d is [m x n]
pub fn matmul_ta_acc(a: &[f64], d: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let at = transpose(a, m, k);
    matmul_acc(&at, d, out, k, m, n);
}

/// Row-wise softmax in place semantics: returns softmax of each length-n row.
pub fn softmax_rows(x: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let o = &mut out[r * n..(r + 1) * n];
        softmax_into(row, o);
    }
    out
}

/// Max-shifted softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = v - max - log_sum;
        }
    }
    out
}

/// Per-row standardization to zero mean / unit variance with `eps` inside
/// the square root. Returns (normalized, per-row inverse std, per-row mean).
pub fn instance_norm_rows(x: &[f64], rows: usize, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * n];
    let mut inv_std = vec![0.0; rows];
    let mut means = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + eps).sqrt();
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv_std[r] = s;
        means[r] = mean;
    }
    (out, inv_std, means)
}

/// Per-row l2 normalization: row / (||row|| + eps). Zero rows map to zero.
pub fn l2_normalize_rows(x: &[f64], rows: usize, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * n];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / (norm + eps);
        for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = v * inv;
        }
        norms[r] = norm;
    }
    (out, norms)
}

pub fn conv_out_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// Unrolls stride-2 3x3 pad-1 patches into a [oh*ow x c_in*9] matrix so
/// the convolution becomes one matmul.
fn im2col_s2(x: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(h, w);
    let ck = c_in * 9;
    let mut cols = vec![0.0; oh * ow * ck];
    for oy in 0..oh {
        for ky in 0..3usize {
            let iy = 2 * oy + ky;
            if iy == 0 || iy > h {
                continue; // padded row (iy-1 outside [0, h))
            }
            let src_row = iy - 1;
            for ci in 0..c_in {
                let x_row = &x[(ci * h + src_row) * w..(ci * h + src_row + 1) * w];
                for kx in 0..3usize {
                    // input col = 2*ox - 1 + kx; valid ox range follows.
                    let ox_start = if kx == 0 { 1 } else { 0 };
                    let col_off = ci * 9 + ky * 3 + kx;
                    for ox in ox_start..ow {
                        let ix = 2 * ox + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        cols[(oy * ow + ox) * ck + col_off] = x_row[ix - 1];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a [oh*ow x c_in*9] gradient back onto the input planes.
fn col2im_s2(d_cols: &[f64], c_in: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(h, w);
    let ck = c_in * 9;
    let mut d_x = vec![0.0; c_in * h * w];
    for oy in 0..oh {
        for ky in 0..3usize {
            let iy = 2 * oy + ky;
            if iy == 0 || iy > h {
                continue;
            }
            let src_row = iy - 1;
            for ci in 0..c_in {
                for kx in 0..3usize {
                    let col_off = ci * 9 + ky * 3 + kx;
                    for ox in 0..ow {
                        let ix = 2 * ox + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        d_x[(ci * h + src_row) * w + ix - 1] += d_cols[(oy * ow + ox) * ck + col_off];
                    }
                }
            }
        }
    }
    d_x
}

/// weight [c_out x c_in x 3 x 3] viewed as [c_in*9 x c_out].
fn weight_cols(weight: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
    let ck = c_in * 9;
    let mut wr = vec![0.0; ck * c_out];
    for co in 0..c_out {
        for ik in 0..ck {
            wr[ik * c_out + co] = weight[co * ck + ik];
        }
    }
    wr
}

/// 3x3 convolution, stride 2, zero padding 1, via im2col.
/// x: [c_in x h x w], weight: [c_out x c_in x 3 x 3], bias: [c_out].
/// Output spatial extent is ceil(h/2) x ceil(w/2). The unrolled patch
/// matrix comes back alongside the output so the backward pass can reuse
/// it.
pub fn conv3x3_s2(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = conv_out_dims(h, w);
    let plane = oh * ow;
    let ck = c_in * 9;
    let cols = im2col_s2(x, c_in, h, w);
    let wr = weight_cols(weight, c_in, c_out);
    let tmp = matmul(&cols, &wr, plane, ck, c_out); // [plane x c_out]
    let mut out = vec![0.0; c_out * plane];
    for p in 0..plane {
        for co in 0..c_out {
            out[co * plane + p] = tmp[p * c_out + co] + bias[co];
        }
    }
    (out, cols)
}

/// Backward of [`conv3x3_s2`] given the cached patch matrix.
/// d_out: [c_out x oh x ow].
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_s2_backward(
    cols: &[f64],
    weight: &[f64],
    d_out: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = conv_out_dims(h, w);
    let plane = oh * ow;
    let ck = c_in * 9;
    let mut d_bias = vec![0.0; c_out];
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db = d_out[co * plane..(co + 1) * plane].iter().sum();
    }
    // d_weight[c_out x ck] = d_out[c_out x plane] * cols[plane x ck],
    // directly in the weight layout with a wide inner loop.
    let d_weight = want_dw.then(|| {
        let mut d_w = vec![0.0; c_out * ck];
        matmul_acc(d_out, cols, &mut d_w, c_out, plane, ck);
        d_w
    });
    let d_x = want_dx.then(|| {
        // d_cols[plane x ck] = d_mat[plane x c_out] * wr^T
        let mut d_mat = vec![0.0; plane * c_out];
        for co in 0..c_out {
            for p in 0..plane {
                d_mat[p * c_out + co] = d_out[co * plane + p];
            }
        }
        let wr = weight_cols(weight, c_in, c_out);
        let mut d_cols = vec![0.0; plane * ck];
        matmul_bt_acc(&d_mat, &wr, &mut d_cols, plane, c_out, ck);
        col2im_s2(&d_cols, c_in, h, w)
    });
    (d_x, d_weight, d_bias)
}

/// One bilinear sample on a [h x w] plane at continuous coordinates where
/// the center of pixel (r, c) sits at (c + 0.5, r + 0.5). Corner indices
/// are clamped to the plane. Returns the four (index, weight) taps.
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let u = x - 0.5;
    let v = y - 0.5;
    let c0f = u.floor();
    let r0f = v.floor();
    let du = u - c0f;
    let dv = v - r0f;
    let clamp = |i: f64, hi: usize| -> usize {
        if i < 0.0 {
            0
        } else if i as usize >= hi {
            hi - 1
        } else {
            i as usize
        }
    };
    let c0 = clamp(c0f, w);
    let c1 = clamp(c0f + 1.0, w);
    let r0 = clamp(r0f, h);
    let r1 = clamp(r0f + 1.0, h);
    [
        (r0 * w + c0, (1.0 - dv) * (1.0 - du)),
        (r0 * w + c1, (1.0 - dv) * du),
        (r1 * w + c0, dv * (1.0 - du)),
        (r1 * w + c1, dv * du),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seed_from(17);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let got = matmul(&a, &b, m, k, n);
        // brute-force oracle
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    want[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_dims_are_ceil_div_two() {
        assert_eq!(conv_out_dims(8, 8), (4, 4));
        assert_eq!(conv_out_dims(9, 7), (5, 4));
        assert_eq!(conv_out_dims(1, 1), (1, 1));
    }

    #[test]
    fn bilinear_center_of_pixel_is_exact() {
        // Plane value = row * 10 + col; sampling at a pixel center returns it.
        let (h, w) = (4, 5);
        let plane: Vec<f64> = (0..h * w).map(|i| (i / w * 10 + i % w) as f64).collect();
        let taps = bilinear_taps(2.5, 3.5, h, w);
        let v: f64 = taps.iter().map(|&(i, wt)| plane[i] * wt).sum();
        assert_eq!(v, 32.0); // row 3, col 2
    }
}
