//! Thin safe wrappers over `matrixmultiply::dgemm` for row-major buffers.

/// Below this size the packing overhead of the blocked kernel dominates.
fn use_naive(m: usize, k: usize, n: usize) -> bool {
    m < 16 || k <= 4 || n <= 4
}

fn scale(c: &mut [f64], beta: f64) {
    if beta == 0.0 {
        c.iter_mut().for_each(|x| *x = 0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|x| *x *= beta);
    }
}

/// `c = a · bᵀ + beta·c` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if use_naive(m, k, n) {
        let c = &mut c[..m * n];
        scale(c, beta);
        for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
                *cv += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        return;
    }
    // SAFETY: bounds checked above; strides describe row-major a, transposed b, row-major c.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn matmul_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if use_naive(m, k, n) {
        let c = &mut c[..m * n];
        scale(c, beta);
        for (arow, crow) in a.chunks_exact(k).take(m).zip(c.chunks_exact_mut(n)) {
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
            }
        }
        return;
    }
    // SAFETY: bounds checked above; all operands row-major.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = aᵀ · b + beta·c` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if use_naive(m, k, n) {
        let c = &mut c[..m * n];
        scale(c, beta);
        for (arow, brow) in a.chunks_exact(m).take(k).zip(b.chunks_exact(n)) {
            for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
                crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
            }
        }
        return;
    }
    // SAFETY: bounds checked above; a is read transposed via its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
