//! Orthogonal regularization: `Σ |W·Wᵀ - I|` summed elementwise over every
//! regularized filter bank.
//!
//! A bank of any rank is viewed as a matrix whose rows are the output
//! filters (`N×C×F×F` → `N × C·F·F`). Overcomplete banks (more rows than
//! columns) use the column Gram matrix `WᵀW`, which is the one that can
//! actually reach the identity.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoConfig {
    /// Strength multiplying the penalty; 0 disables.
    pub coefficient: f64,
    /// Names of the regularized parameter tensors.
    pub targets: Vec<String>,
}

impl OrthoConfig {
    pub fn new(coefficient: f64, targets: Vec<String>) -> Self {
        assert!(coefficient >= 0.0, "ortho coefficient must be nonnegative");
        Self { coefficient, targets }
    }

    pub fn enabled(&self) -> bool {
        self.coefficient > 0.0
    }
}

/// `(rows, cols)` of the matrix view of a bank.
pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product::<usize>().max(1))
}

/// `Gram - I` for the small-side Gram matrix, plus whether the columns were used.
fn gram_minus_identity<T: Real>(w: &[T], rows: usize, cols: usize) -> (Vec<T>, usize, bool) {
    let by_cols = rows > cols;
    let side = if by_cols { cols } else { rows };
    let mut gram = vec![T::zero(); side * side];
    if by_cols {
        T::gemm(true, false, cols, cols, rows, T::one(), w, w, T::zero(), &mut gram);
    } else {
        T::gemm(false, true, rows, rows, cols, T::one(), w, w, T::zero(), &mut gram);
    }
    for i in 0..side {
        gram[i * side + i] -= T::one();
    }
    (gram, side, by_cols)
}

/// Elementwise L1 norm of `W·Wᵀ - I`.
pub fn ortho_penalty<T: Real>(w: &Tensor<T>) -> T {
    let (rows, cols) = matrix_dims(w.shape());
    let (g, _, _) = gram_minus_identity(w.data(), rows, cols);
    g.iter().map(|v| v.abs()).sum()
}

/// Subgradient `2·sign(W·Wᵀ - I)·W` (or `2·W·sign(WᵀW - I)` when
/// overcomplete), with `sign(0) = 0`.
pub fn ortho_grad<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = matrix_dims(w.shape());
    let (g, side, by_cols) = gram_minus_identity(w.data(), rows, cols);
    let s: Vec<T> = g
        .iter()
        .map(|&v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let two = T::lit(2.0);
    let mut out = vec![T::zero(); rows * cols];
    if by_cols {
        T::gemm(false, false, rows, cols, side, two, w.data(), &s, T::zero(), &mut out);
    } else {
        T::gemm(false, false, rows, cols, side, two, &s, w.data(), T::zero(), &mut out);
    }
    Tensor::new(w.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_penalty_and_gradient() {
        let eye = Tensor::<f64>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(ortho_penalty(&eye), 0.0);
        assert!(ortho_grad(&eye).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaled_identity() {
        let w = Tensor::<f64>::from_fn([3, 3], |i| if i % 4 == 0 { 2.0 } else { 0.0 });
        assert_eq!(ortho_penalty(&w), 9.0);
    }

    #[test]
    fn scalar_case() {
        let w = Tensor::<f64>::new([1, 1], vec![2.0]).unwrap();
        assert_eq!(ortho_penalty(&w), 3.0);
        assert_eq!(ortho_grad(&w).data(), &[4.0]);
    }

    #[test]
    fn conv_bank_uses_rows_as_filters() {
        assert_eq!(matrix_dims(&[8, 3, 5, 5]), (8, 75));
        assert_eq!(matrix_dims(&[7]), (7, 1));
    }
}
