//! Dense f64 matrix products, backed by `matrixmultiply`'s blocked GEMM.
//!
//! All matrices are row-major slices. The three entry points cover the
//! forward product and the two transposed products backward passes need,
//! without ever materializing a transposed copy.

/// out = A (m×k) · B (k×n); out must hold m·n elements and is overwritten.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out += Aᵀ · B where A is (k×m) row-major, B is (k×n); out is m×n.
pub fn matmul_at_b_accum(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out += A · Bᵀ where A is (m×k) row-major, B is (n×k); out is m×n.
pub fn matmul_a_bt_accum(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, &mut out);
        let expect = naive(m, k, n, &a, &b);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_match_naive() {
        let (m, k, n) = (6, 8, 4);
        // A stored as k×m, we want AᵀB
        let a: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.19).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul_at_b_accum(m, k, n, &a, &b, &mut out);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[p * m + i] * b[p * n + j];
                }
                assert!((out[i * n + j] - s).abs() < 1e-12);
            }
        }
        // A (m×k) · Bᵀ with B stored n×k
        let a2: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.07).sin()).collect();
        let b2: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut out2 = vec![0.0; m * n];
        matmul_a_bt_accum(m, k, n, &a2, &b2, &mut out2);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a2[i * k + p] * b2[j * k + p];
                }
                assert!((out2[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}
