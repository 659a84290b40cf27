use crate::Scalar;

/// `c (m x n) = op(a) * op(b) + beta * c` for row-major buffers, where
/// `op` optionally transposes. `a` is stored as `m x k` (or `k x m` when
/// `trans_a`), `b` as `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    trans_a: bool,
    b: &[S],
    trans_b: bool,
    c: &mut [S],
    beta: S,
) {
    assert_eq!(a.len(), m * k, "matmul lhs extent");
    assert_eq!(b.len(), k * n, "matmul rhs extent");
    assert_eq!(c.len(), m * n, "matmul output extent");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents were asserted above and `c` is a distinct &mut slice.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
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
