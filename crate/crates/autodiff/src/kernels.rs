//! Raw numeric kernels shared by the forward and backward passes.

use crate::error::{AdError, AdResult};

/// `c = alpha * op(a) * op(b) + beta * c`, with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`. Inputs are row-major; `trans_*` selects the
/// transposed view without copying.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the dimensions and
    // strides describe in-bounds row-major (or transposed) views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Result shape of numpy-style broadcasting, aligning shapes on the right.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> AdResult<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(AdError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` when broadcast into `out` (zero along broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`, in
/// row-major order.
pub fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += counter[d] * sa[d];
            ib += counter[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance all but the innermost axis
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

/// Maximum of a slice; `-inf` when empty.
#[inline]
pub fn slice_max(xs: &[f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; 4];
    let chunks = xs.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l = if x > *l { x } else { *l };
        }
    }
    let mut m = lanes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &x in rest {
        m = m.max(x);
    }
    m
}

/// Sum of a slice with four interleaved accumulators.
#[inline]
pub fn slice_sum(xs: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let chunks = xs.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for (l, &x) in lanes.iter_mut().zip(c) {
            *l += x;
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + rest.iter().sum::<f64>()
}

/// Dot product with four interleaved accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Numerically stable softmax of `row` written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row: leave it all-zero
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        total += e;
    }
    let inv = 1.0 / total;
    out.iter_mut().for_each(|x| *x *= inv);
}

/// Log-sum-exp of a row; `-inf` for an empty or fully masked row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const EXP_C: [f64; 13] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5_040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
];

/// Branch-free `exp` for finite arguments, accurate to a few ulp.
///
/// Range reduction `x = k ln2 + r` with `|r| <= ln2 / 2`, then a degree-12
/// Taylor polynomial for `exp(r)`; `2^k` is assembled from exponent bits.
/// Arguments below -708 return 0.
#[inline(always)]
pub fn fast_exp(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding it rounds to the nearest integer in the low bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let xc = if x < -708.0 { -708.0 } else { x };
    let xc = if xc > 709.0 { 709.0 } else { xc };
    let shifted = xc * LOG2E + SHIFTER;
    let k = shifted - SHIFTER;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Estrin-style split keeps the dependency chain short
    let r2 = r * r;
    let r4 = r2 * r2;
    let p01 = EXP_C[0] + EXP_C[1] * r;
    let p23 = EXP_C[2] + EXP_C[3] * r;
    let p45 = EXP_C[4] + EXP_C[5] * r;
    let p67 = EXP_C[6] + EXP_C[7] * r;
    let p89 = EXP_C[8] + EXP_C[9] * r;
    let p1011 = EXP_C[10] + EXP_C[11] * r;
    let lo = p01 + p23 * r2;
    let mid = p45 + p67 * r2;
    let hi = p89 + p1011 * r2 + EXP_C[12] * r4;
    let p = lo + r4 * (mid + r4 * hi);
    let k_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let scale = f64::from_bits(k_bits.wrapping_add(1023) << 52);
    let y = p * scale;
    if x < -708.0 {
        0.0
    } else {
        y
    }
}

/// Defines a public kernel with an AVX2 build selected at runtime. No FMA
/// is enabled and reductions use explicit lanes, so both builds produce
/// bitwise-identical results.
macro_rules! avx2_dispatch {
    ($(#[$meta:meta])* pub fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $body:block) => {
        $(#[$meta])*
        pub fn $name($($arg: $ty),*) {
            #[inline(always)]
            fn portable($($arg: $ty),*) $body

            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2")]
            unsafe fn avx2($($arg: $ty),*) {
                portable($($arg),*)
            }

            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { avx2($($arg),*) };
                return;
            }
            portable($($arg),*)
        }
    };
}

avx2_dispatch! {
    /// `xs[i] = exp(xs[i] - shift)` over a slice.
    pub fn exp_shifted_in_place(xs: &mut [f64], shift: f64) {
        for x in xs.iter_mut() {
            *x = fast_exp(*x - shift);
        }
    }
}

avx2_dispatch! {
    /// Softmax rows in place: `row = softmax(row + bias)`.
    pub fn softmax_rows_biased(rows: &mut [f64], width: usize, bias: Option<&[f64]>) {
        for row in rows.chunks_exact_mut(width) {
            if let Some(b) = bias {
                for (s, bk) in row.iter_mut().zip(b) {
                    *s += bk;
                }
            }
            let max = slice_max(row);
            for x in row.iter_mut() {
                *x = fast_exp(*x - max);
            }
            let inv = 1.0 / slice_sum(row);
            row.iter_mut().for_each(|s| *s *= inv);
        }
    }
}

avx2_dispatch! {
    /// Column means of a row-major `[rows, width]` block.
    pub fn column_means(p: &[f64], width: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for row in p.chunks_exact(width) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / (p.len() / width.max(1)) as f64;
        out.iter_mut().for_each(|x| *x *= inv);
    }
}

avx2_dispatch! {
    /// Backward of mean-over-rows of row softmaxes `p`: given the upstream
    /// gradient `up` of the column means, writes the logit gradient into `ds`
    /// and accumulates its column sums into `col_sums` when given.
    pub fn pooled_softmax_backward(
        p: &[f64],
        up: &[f64],
        width: usize,
        ds: &mut [f64],
        col_sums: Option<&mut [f64]>,
    ) {
        let inv = 1.0 / (p.len() / width.max(1)) as f64;
        let mut col_sums = col_sums;
        for (pr, dsr) in p.chunks_exact(width).zip(ds.chunks_exact_mut(width)) {
            let c = dot(pr, up);
            for ((s, &pk), &uk) in dsr.iter_mut().zip(pr).zip(up) {
                *s = pk * (uk - c) * inv;
            }
            if let Some(cs) = col_sums.as_deref_mut() {
                for (b, s) in cs.iter_mut().zip(dsr.iter()) {
                    *b += s;
                }
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T a
        let mut d = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, true, &a, false, 0.0, &mut d);
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        let mut e = [1.0; 4];
        gemm(2, 3, 2, 2.0, &a, false, &a, true, 1.0, &mut e);
        assert_eq!(e, [29.0, 65.0, 65.0, 155.0]);
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[4, 5, 1]).unwrap(), vec![4, 5, 3]);
        assert!(broadcast_shape("t", &[4, 3], &[4]).is_err());
        assert_eq!(broadcast_strides(&[3], &[4, 3]), vec![0, 1]);
        assert_eq!(broadcast_strides(&[4, 1], &[4, 3]), vec![1, 0]);
    }

    #[test]
    fn fast_exp_matches_libm() {
        let mut worst: f64 = 0.0;
        let mut x = -700.0;
        while x < 700.0 {
            let rel = (fast_exp(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 1e-14, "worst relative error {worst}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_exp(-800.0), 0.0);
        assert_eq!(fast_exp(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn biased_softmax_matches_reference() {
        let rows = [0.3, -1.2, 4.0, 0.0, 2.5, 2.5, -7.0, 1.0, 0.1, 0.2];
        let bias = [0.5, 0.0, -0.25, 1.0, 0.0];
        let mut fast = rows;
        softmax_rows_biased(&mut fast, 5, Some(&bias));
        for (r, f) in rows.chunks(5).zip(fast.chunks(5)) {
            let shifted: Vec<f64> = r.iter().zip(&bias).map(|(a, b)| a + b).collect();
            let mut reference = [0.0; 5];
            softmax_into(&shifted, &mut reference);
            for (a, b) in f.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
        let mut means = [0.0; 5];
        column_means(&fast, 5, &mut means);
        assert!((means.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let mut out = [0.0; 3];
        softmax_into(&[0.0, f64::NEG_INFINITY, 0.0], &mut out);
        assert_eq!(out, [0.5, 0.0, 0.5]);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
