//! Straight-line dense kernels. Every reduction runs in a fixed order so
//! results are bitwise reproducible for a given precision.

use super::tensor::Scalar;

const LANES: usize = 16;

/// Dot product with a fixed lane split.
#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (a, b) in xr.iter().zip(yr) {
        tail += *a * *b;
    }
    let mut s = T::zero();
    for a in acc {
        s += a;
    }
    s + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &s) in a_row.iter().enumerate() {
            if s != T::zero() {
                axpy(s, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cj) in c_row.iter_mut().enumerate() {
            *cj = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, c: &mut [T]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &s) in a_row.iter().enumerate() {
            if s != T::zero() {
                axpy(s, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`, accumulating into `c`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            *cj += dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating into `c`.
pub fn matmul_nn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &s) in a_row.iter().enumerate() {
            if s != T::zero() {
                axpy(s, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 37, 3);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n)
            .map(|i| ((i * 3 % 13) as f64) * 0.5 - 2.0)
            .collect();
        let want = naive(&a, &b, m, k, n);
        assert_eq!(matmul_nn(&a, &b, m, k, n), want);

        let bt = transpose(&b, k, n);
        let got = matmul_nt(&a, &bt, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, k, m, n, &mut c);
        assert_eq!(c, want);
    }
}
