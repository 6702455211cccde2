//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;
use crate::tensor::Tensor;

/// DCGAN-style `N(0, std²)` initialization.
pub fn normal<T: Real, R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

/// Row-major `rows × cols` matrix with orthonormal rows (or columns, when
/// `rows > cols`), scaled by `gain`.
///
/// Gaussian draw followed by modified Gram-Schmidt on the short side.
pub fn orthogonal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<T> {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![T::zero(); rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            out[r * cols + c] = T::lit(x * gain);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn rows_are_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(4, 9), (9, 4), (6, 6)] {
            let m: Vec<f64> = orthogonal(r, c, 1.0, &mut rng);
            let (short_rows, by_rows) = if r <= c { (r, true) } else { (c, false) };
            for i in 0..short_rows {
                for j in 0..short_rows {
                    let dot: f64 = if by_rows {
                        (0..c).map(|k| m[i * c + k] * m[j * c + k]).sum()
                    } else {
                        (0..r).map(|k| m[k * c + i] * m[k * c + j]).sum()
                    };
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }
}
