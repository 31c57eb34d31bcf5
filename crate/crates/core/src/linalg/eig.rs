//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SymEig<T> {
    /// Sorted descending.
    pub values: Vec<T>,
    /// Column j is the unit eigenvector for `values[j]`.
    pub vectors: Matrix<T>,
}

/// Largest asymmetry accepted by [`sym_eig`], relative to `max(1, max|a|)`.
pub fn symmetry_tolerance<T: Scalar>() -> T {
    T::lit(1e-12).max(T::lit(64.0) * T::epsilon())
}

/// Eigendecomposition of a symmetric matrix.
///
/// Input asymmetry above [`symmetry_tolerance`] is rejected. The first
/// significant entry of each eigenvector is made non-negative.
pub fn sym_eig<T: Scalar>(a: &Matrix<T>) -> Result<SymEig<T>> {
    let n = a.rows();
    let Some(asym) = a.max_asymmetry() else {
        return Err(Error::shape("sym_eig", format!("{}x{} is not square", a.rows(), a.cols())));
    };
    if n == 0 {
        return Err(Error::invalid("sym_eig of an empty matrix"));
    }
    let scale = T::one().max(a.max_abs());
    if asym > symmetry_tolerance::<T>() * scale {
        return Err(Error::NotSymmetric(asym.to_f64_lossy()));
    }

    let mut m = Matrix::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)]) / T::lit(2.0));
    let mut v = Matrix::<T>::identity(n);
    let total: T = m.as_slice().iter().map(|&x| x * x).sum();
    let threshold = T::epsilon() * T::epsilon() * total;
    let cap = super::svd::sweep_cap(n, n);

    let mut sweeps = 0;
    loop {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= threshold || off == T::zero() {
            break;
        }
        if sweeps >= cap {
            return Err(Error::NoConvergence { algorithm: "Jacobi eigensolver", sweeps });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = T::zero();
                m[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).expect("finite eigenvalues").then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    let tol = T::epsilon().sqrt();
    for j in 0..n {
        let lead = (0..n).map(|i| vectors[(i, j)]).find(|x| x.abs() > tol);
        if matches!(lead, Some(x) if x < T::zero()) {
            for i in 0..n {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
    Ok(SymEig { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0)).normalize_rows().unwrap()
    }

    #[test]
    fn identity_and_diagonal() {
        let e = sym_eig(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let e = sym_eig(&Matrix::<f64>::diag(&[0.01, 0.5, 0.49])).unwrap();
        assert_eq!(e.values, vec![0.5, 0.49, 0.01]);
    }

    #[test]
    fn autocorrelation_is_psd_with_matching_trace() {
        for seed in 0..20 {
            let z = unit_rows(12, 6, seed);
            let a = z.t_matmul(&z).unwrap().scale(1.0 / 12.0);
            let e = sym_eig(&a).unwrap();
            assert!(e.values.iter().all(|&l| l >= -1e-12));
            let sum: f64 = e.values.iter().sum();
            assert!((sum - a.trace()).abs() < 1e-10);
            // A v = λ v and orthonormal vectors.
            let av = a.matmul(&e.vectors).unwrap();
            for j in 0..6 {
                for i in 0..6 {
                    assert!((av[(i, j)] - e.values[j] * e.vectors[(i, j)]).abs() < 1e-9);
                }
            }
            let g = e.vectors.t_matmul(&e.vectors).unwrap();
            assert!(g.sub(&Matrix::identity(6)).unwrap().max_abs() < 1e-10);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rejects_asymmetric_and_non_square() {
        let a = Matrix::<f64>::from_f64_rows(&[&[1.0, 2.0], &[2.1, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::NotSymmetric(_))));
        assert!(sym_eig(&Matrix::<f64>::zeros(2, 3)).is_err());
    }
}
