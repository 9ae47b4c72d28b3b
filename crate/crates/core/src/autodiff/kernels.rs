//! Accumulating matrix-product kernels on row-major slices.
//!
//! All three variants add into `c`; callers zero it first when they want a
//! plain product. Summation order is fixed, so results are bitwise
//! reproducible.

/// Inner loops shorter than this are reorganized so a long axis runs
/// innermost. The choice depends only on shapes, so results stay
/// reproducible.
const NARROW: usize = 32;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * n == 0 || k == 0 {
        return;
    }
    if n < NARROW && k >= NARROW {
        dots(a, &transpose(b, k, n), c, k, n);
    } else {
        axpy_rows(a, b, c, k, n);
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m * n == 0 || k == 0 {
        return;
    }
    if k < NARROW && n >= NARROW {
        axpy_rows(a, &transpose(b, n, k), c, k, n);
    } else {
        dots(a, b, c, k, n);
    }
}

/// `c[m,n] += a[r,m]ᵀ · b[r,n]`
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], r: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(c.len(), m * n);
    if m * n == 0 || r == 0 {
        return;
    }
    if n < NARROW && r >= NARROW {
        dots(&transpose(a, r, m), &transpose(b, r, n), c, r, n);
        return;
    }
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&ai, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += ai * bj;
            }
        }
    }
}

/// `c[i,:] += Σ_p a[i,p] · b[p,:]`
fn axpy_rows(a: &[f64], b: &[f64], c: &mut [f64], k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[i,j] += a[i,:] · b[j,:]` over rows of length `k`.
fn dots(a: &[f64], b: &[f64], c: &mut [f64], k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cj, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cj += dot(a_row, b_row);
        }
    }
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    if cols == 0 {
        return t;
    }
    for (r, row) in x.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// Four-lane dot product; the fixed lane split keeps it deterministic while
/// letting the compiler vectorize.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let mut tail = 0.0;
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        tail += x * y;
    }
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_naive_product() {
        // Covers both loop orders of every variant, plus empty extents.
        for (m, k, n) in [(3, 5, 7), (4, 40, 6), (40, 6, 35), (33, 37, 3), (0, 4, 2), (2, 0, 3)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let close = |c: &[f64]| c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12);

            let mut c = vec![0.0; m * n];
            mm_nn_acc(&a, &b, &mut c, m, k, n);
            assert!(close(&c), "nn {m}x{k}x{n}");

            let mut c = vec![0.0; m * n];
            mm_nt_acc(&a, &transpose(&b, k, n), &mut c, m, k, n);
            assert!(close(&c), "nt {m}x{k}x{n}");

            let mut c = vec![0.0; m * n];
            mm_tn_acc(&transpose(&a, m, k), &b, &mut c, k, m, n);
            assert!(close(&c), "tn {m}x{k}x{n}");
        }
    }
}
