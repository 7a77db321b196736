//! Orthonormal DCT-II and its separable 2D application.

use std::f64::consts::PI;

use crate::linalg::gemm;

/// `k x k` orthonormal DCT-II matrix, row `u` is frequency `u`.
pub fn dct_matrix(k: usize) -> Vec<f64> {
    let mut d = vec![0.0; k * k];
    for u in 0..k {
        let s = if u == 0 {
            (1.0 / k as f64).sqrt()
        } else {
            (2.0 / k as f64).sqrt()
        };
        for a in 0..k {
            d[u * k + a] = s * (PI * (2 * a + 1) as f64 * u as f64 / (2 * k) as f64).cos();
        }
    }
    d
}

/// Kronecker product `D ⊗ D`: the `k² x k²` 2D transform acting on row-major
/// vectorized images.
pub fn dct_matrix_2d(k: usize) -> Vec<f64> {
    let d = dct_matrix(k);
    let n = k * k;
    let mut f = vec![0.0; n * n];
    for u in 0..k {
        for v in 0..k {
            let row = &mut f[(u * k + v) * n..(u * k + v + 1) * n];
            for a in 0..k {
                for b in 0..k {
                    row[a * k + b] = d[u * k + a] * d[v * k + b];
                }
            }
        }
    }
    f
}

/// `D X D^T` for a row-major `k x k` image.
pub fn forward_2d(d: &[f64], k: usize, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    gemm(k, k, k, d, false, x, false, scratch, false);
    gemm(k, k, k, scratch, false, d, true, out, false);
}

/// `D^T Y D`, the inverse of [`forward_2d`].
pub fn inverse_2d(d: &[f64], k: usize, y: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    gemm(k, k, k, d, true, y, false, scratch, false);
    gemm(k, k, k, scratch, false, d, false, out, false);
}

/// Frequency indices `u * k + v` ordered by `(u + v, u)`: lowest frequencies
/// (the top-left corner of the coefficient image) first.
pub fn low_frequency_order(k: usize) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = (0..k).flat_map(|u| (0..k).map(move |v| (u, v))).collect();
    pairs.sort_by_key(|&(u, v)| (u + v, u));
    pairs.into_iter().map(|(u, v)| u * k + v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_is_orthonormal_up_to_64() {
        for k in [1, 2, 3, 4, 8, 16, 50, 64] {
            let d = dct_matrix(k);
            let mut ddt = vec![0.0; k * k];
            gemm(k, k, k, &d, false, &d, true, &mut ddt, false);
            for i in 0..k {
                for j in 0..k {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((ddt[i * k + j] - e).abs() < 1e-10, "k={k}");
                }
            }
        }
    }

    #[test]
    fn separable_transform_round_trips() {
        let k = 5;
        let d = dct_matrix(k);
        let x: Vec<f64> = (0..k * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let (mut s, mut y, mut back) = (vec![0.0; k * k], vec![0.0; k * k], vec![0.0; k * k]);
        forward_2d(&d, k, &x, &mut s, &mut y);
        inverse_2d(&d, k, &y, &mut s, &mut back);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn low_frequency_order_starts_top_left() {
        assert_eq!(&low_frequency_order(4)[..6], &[0, 1, 4, 2, 5, 8]);
        let mut all = low_frequency_order(7);
        all.sort_unstable();
        assert_eq!(all, (0..49).collect::<Vec<_>>());
    }
}
