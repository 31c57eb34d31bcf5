//! Dense linear algebra: matrix kernels, SVD, symmetric eigensolver, norms.

mod eig;
mod matrix;
mod svd;

pub use eig::{sym_eig, symmetry_tolerance, SymEig};
pub use matrix::{dot, norm, Matrix};
pub use svd::{singular_values, svd, sweep_cap, Svd};

use crate::error::Result;
use crate::scalar::Scalar;

/// Sum of singular values.
pub fn nuclear_norm<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    Ok(singular_values(a)?.into_iter().sum())
}

pub fn frobenius_norm<T: Scalar>(a: &Matrix<T>) -> T {
    a.as_slice().iter().map(|&v| v * v).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        svd(&random(n, n, rng)).unwrap().u
    }

    #[test]
    fn nuclear_norm_examples() {
        assert!((nuclear_norm(&Matrix::<f64>::identity(3)).unwrap() - 3.0).abs() < 1e-15);
        let ones = Matrix::<f64>::filled(2, 2, 1.0);
        assert!((nuclear_norm(&ones).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::<f64>::zeros(3, 4)), 0.0);
        assert!((frobenius_norm(&Matrix::<f64>::identity(5)) - 5f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random(5, 7, &mut rng);
            let from_s: f64 = svd(&a).unwrap().s.iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((frobenius_norm(&a) - from_s).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random(8, 5, &mut rng);
            let s = singular_values(&a).unwrap();
            let e = sym_eig(&a.t_matmul(&a).unwrap()).unwrap();
            for (sv, ev) in s.iter().zip(&e.values) {
                assert!((sv - ev.max(0.0).sqrt()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn nuclear_norm_permutation_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = random(6, 4, &mut rng);
            let base = nuclear_norm(&a).unwrap();
            let mut rows: Vec<usize> = (0..6).collect();
            rows.shuffle(&mut rng);
            let mut cols: Vec<usize> = (0..4).collect();
            cols.shuffle(&mut rng);
            let p = a.select_rows(&rows).unwrap().transpose().select_rows(&cols).unwrap().transpose();
            assert!((nuclear_norm(&p).unwrap() - base).abs() < 1e-9);
            let l = random_orthogonal(6, &mut rng);
            let r = random_orthogonal(4, &mut rng);
            let rotated = l.matmul(&a).unwrap().matmul(&r).unwrap();
            assert!((nuclear_norm(&rotated).unwrap() - base).abs() < 1e-9);
        }
    }
}
