//! Row-major `f64` matrix products backed by `matrixmultiply`.
//!
//! The kernel is single-threaded with a fixed blocking order, so results are
//! bit-reproducible for identical inputs.

/// `c = op(a) * op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
/// A transposed operand is stored untransposed, i.e. `a` is `[k, m]` when
/// `a_trans` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64]) {
    run(m, k, n, a, a_trans, b, b_trans, c, 0.0);
}

/// Same as [`gemm`] but accumulates into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64]) {
    run(m, k, n, a, a_trans, b, b_trans, c, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn run(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
