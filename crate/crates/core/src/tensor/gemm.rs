//! Thin wrappers over the `matrixmultiply` f64 kernels. All matrices are
//! row-major contiguous; transposed variants use stride tricks instead of
//! materializing copies. Degenerate shapes with a tiny inner dimension skip
//! the packing kernels for plain accumulation loops, which are memory-bound
//! and considerably faster there.

const SMALL_K: usize = 8;

/// C[m,n] = alpha * A[m,k] * B[k,n] + beta * C
pub fn dgemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k <= SMALL_K {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = alpha * a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = alpha * A[m,k] * B^T + beta * C, where B is stored as [n,k].
pub fn dgemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if k <= SMALL_K {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut dot = 0.0;
                for p in 0..k {
                    dot += arow[p] * brow[p];
                }
                *cv += alpha * dot;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = alpha * A^T * B + beta * C, where A is stored as [k,m].
pub fn dgemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Wide outputs with a modest contraction depth hit the packing-dominated
    // regime of the kernel; a chunked accumulation loop is faster there.
    if n >= 4096 && k <= 512 {
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            for v in c.iter_mut() {
                *v *= beta;
            }
        }
        const NB: usize = 1024;
        let mut acc = [0.0f64; NB];
        let mut j0 = 0;
        while j0 < n {
            let jl = NB.min(n - j0);
            for i in 0..m {
                let acc = &mut acc[..jl];
                acc.fill(0.0);
                for p in 0..k {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n + j0..p * n + j0 + jl];
                    for (x, bv) in acc.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
                let crow = &mut c[i * n + j0..i * n + j0 + jl];
                for (cv, x) in crow.iter_mut().zip(acc.iter()) {
                    *cv += alpha * *x;
                }
            }
            j0 += jl;
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 - i as f64 * 0.25).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }

        let mut c = vec![0.0; m * n];
        dgemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, want);

        // B^T stored as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        dgemm_nt(m, k, n, 1.0, &a, &bt, 0.0, &mut c);
        assert_eq!(c, want);

        // A^T stored as [k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        dgemm_tn(m, k, n, 1.0, &at, &b, 0.0, &mut c);
        assert_eq!(c, want);
    }
}
