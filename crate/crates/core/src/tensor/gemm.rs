//! Thin wrapper over `matrixmultiply::dgemm`.
//!
//! Transposition is expressed through strides rather than copies: a row-major
//! `m x k` matrix read with swapped strides is its transpose. All four
//! transpose combinations needed by the backward pass go through here.

/// out[m x n] += alpha * op(a) * op(b), where op is identity or transpose.
///
/// `a` holds `am x ak` row-major; if `ta` it is consumed as its transpose
/// (so op(a) is `ak x am`). Same for `b`. Caller guarantees the contracted
/// dimensions line up; debug asserts catch mistakes.
#[allow(clippy::too_many_arguments)]
pub fn dgemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Row-major strides for the *operated* view. A stored row-major p x q
    // matrix has strides (q, 1); its transpose view has strides (1, q).
    let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
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
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        dgemm_acc(2, 2, 2, 1.0, &a, false, &eye, false, 0.0, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn hand_worked_2x3_3x2() {
        // [[1,2,3],[4,5,6]] * [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = vec![0.0; 4];
        dgemm_acc(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut out);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_views_match_naive() {
        // a is 3x2 stored; used transposed it acts as 2x3.
        let a = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        // op(a)=a^T (2x3), op(b)=b (3x2) -> 2x2
        let mut out = vec![0.0; 4];
        dgemm_acc(2, 3, 2, 1.0, &a, true, &b, false, 0.0, &mut out);
        let at = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(out, naive(2, 3, 2, &at, &b));

        // op(b)=b^T: a2 (2x3) * b2^T where b2 is 2x3 stored -> contract over 3
        let a2 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b2 = vec![1.0, 0.0, 2.0, 0.0, 1.0, 3.0]; // 2x3, transpose is 3x2
        let mut out2 = vec![0.0; 4];
        dgemm_acc(2, 3, 2, 1.0, &a2, false, &b2, true, 0.0, &mut out2);
        let b2t = vec![1.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        assert_eq!(out2, naive(2, 3, 2, &a2, &b2t));
    }

    #[test]
    fn beta_one_accumulates() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![2.0, 0.0, 0.0, 2.0];
        let mut out = vec![10.0, 0.0, 0.0, 10.0];
        dgemm_acc(2, 2, 2, 1.0, &a, false, &b, false, 1.0, &mut out);
        assert_eq!(out, vec![12.0, 0.0, 0.0, 12.0]);
    }
}
