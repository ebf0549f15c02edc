//! Register-blocked dense products on row-major slices.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        return unsafe { gemm_avx2(m, n, k, a, b, c) };
    }
    gemm_impl(m, n, k, a, b, c)
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked.
        return unsafe { gemm_nt_avx2(m, n, k, a, b, c) };
    }
    gemm_nt_impl(m, n, k, a, b, c)
}

// Same kernels compiled with wider vectors. Rust never contracts a*b+c into
// an FMA, so both builds produce identical bits.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_impl(m, n, k, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_avx2(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_nt_impl(m, n, k, a, b, c)
}

#[inline(always)]
fn gemm_impl(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + ii) * k + p];
                    for (x, bv) in row.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                let crow = &mut c[(i + ii) * n + j..(i + ii) * n + j + NR];
                for (x, v) in crow.iter_mut().zip(row) {
                    *x += v;
                }
            }
            j += NR;
        }
        if j < n {
            for ii in i..i + MR {
                gemm_row(n, k, j, &a[ii * k..(ii + 1) * k], b, &mut c[ii * n..(ii + 1) * n]);
            }
        }
        i += MR;
    }
    for ii in i..m {
        gemm_row(n, k, 0, &a[ii * k..(ii + 1) * k], b, &mut c[ii * n..(ii + 1) * n]);
    }
}

/// One output row from column `j0` on.
#[inline(always)]
fn gemm_row(n: usize, k: usize, j0: usize, arow: &[f64], b: &[f64], crow: &mut [f64]) {
    for (p, av) in arow.iter().enumerate().take(k) {
        let brow = &b[p * n + j0..(p + 1) * n];
        for (x, bv) in crow[j0..].iter_mut().zip(brow) {
            *x += av * bv;
        }
    }
}

const TR: usize = 4;

#[inline(always)]
fn gemm_nt_impl(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let mut i = 0;
    while i + TR <= m {
        let mut j = 0;
        while j + TR <= n {
            let mut acc = [[0.0; TR]; TR];
            for p in 0..k {
                let av = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
                let bv = [b[j * k + p], b[(j + 1) * k + p], b[(j + 2) * k + p], b[(j + 3) * k + p]];
                for (row, x) in acc.iter_mut().zip(av) {
                    for (r, y) in row.iter_mut().zip(bv) {
                        *r += x * y;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                for (jj, v) in row.iter().enumerate() {
                    c[(i + ii) * n + j + jj] += v;
                }
            }
            j += TR;
        }
        for ii in i..i + TR {
            for jj in j..n {
                c[ii * n + jj] += dot(&a[ii * k..(ii + 1) * k], &b[jj * k..(jj + 1) * k]);
            }
        }
        i += TR;
    }
    for ii in i..m {
        for jj in 0..n {
            c[ii * n + jj] += dot(&a[ii * k..(ii + 1) * k], &b[jj * k..(jj + 1) * k]);
        }
    }
}

#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major transpose of an `r×c` matrix.
pub(crate) fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
