// Raw numeric loops behind the graph operations. All matrices are row-major.

use crate::Real;

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `acc[m,k] += g[m,n] · b[k,n]ᵀ`
pub(crate) fn acc_matmul_bt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize, acc: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for kk in 0..k {
            acc[i * k + kk] += dot(grow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `acc[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn acc_at_matmul<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize, acc: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, grow, &mut acc[kk * n..(kk + 1) * n]);
            }
        }
    }
}

/// `acc[m,k] += g[m,n] · b[n,k]`
pub(crate) fn acc_matmul<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize, acc: &mut [T]) {
    for i in 0..m {
        let arow = &mut acc[i * k..(i + 1) * k];
        for (j, &gij) in g[i * n..(i + 1) * n].iter().enumerate() {
            if gij != T::zero() {
                axpy(gij, &b[j * k..(j + 1) * k], arow);
            }
        }
    }
}

/// `acc[n,k] += g[m,n]ᵀ · a[m,k]`
pub(crate) fn acc_gt_matmul<T: Real>(g: &[T], a: &[T], m: usize, n: usize, k: usize, acc: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for (j, &gij) in g[i * n..(i + 1) * n].iter().enumerate() {
            if gij != T::zero() {
                axpy(gij, arow, &mut acc[j * k..(j + 1) * k]);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn hardtanh<T: Real>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut out = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let naive: f64 = (0..k).map(|kk| a[i * k + kk] * b[kk * n + j]).sum();
                assert!((out[i * n + j] - naive).abs() < 1e-12);
            }
        }
        // b transposed to [n,k]
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut out2 = vec![0.0; m * n];
        matmul_bt(&a, &bt, m, k, n, &mut out2);
        for (x, y) in out.iter().zip(&out2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let x: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let expected: f64 = x.iter().map(|v| v * v).sum();
        assert_eq!(dot(&x, &x), expected);
    }
}
