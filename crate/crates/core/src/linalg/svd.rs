//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of the input directly, which
//! keeps small singular values accurate to working precision. That matters
//! here: collapse diagnostics live in the tail of the spectrum.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Thin SVD `a = u · diag(s) · vt` with `k = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    /// m×k, orthonormal columns.
    pub u: Matrix<T>,
    /// k singular values, non-increasing.
    pub s: Vec<T>,
    /// k×n, orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn rank_k(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vt`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, v) in us.row_mut(i).iter_mut().enumerate() {
                *v *= self.s[j];
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }

    /// `u · vt`, the gradient of the nuclear norm where the spectrum is simple
    /// and nonzero.
    pub fn polar_factor(&self) -> Matrix<T> {
        self.u.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// Sweep cap for the Jacobi iterations on an m×n input.
pub fn sweep_cap(m: usize, n: usize) -> usize {
    10 * m.max(n) * 100
}

/// Computes the thin SVD of `a`.
///
/// Deterministic: the first entry of each left singular vector whose
/// magnitude exceeds `√ε` is non-negative.
pub fn svd<T: Scalar>(a: &Matrix<T>) -> Result<Svd<T>> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    let mut out = if m >= n {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Svd { u: t.vt.transpose(), s: t.s, vt: t.u.transpose() }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Singular values only.
pub fn singular_values<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>> {
    Ok(svd(a)?.s)
}

fn jacobi_tall<T: Scalar>(a: &Matrix<T>) -> Result<Svd<T>> {
    let (m, n) = a.shape();
    // Row p of `w` holds column p of the working matrix; likewise for `v`.
    let mut w = a.transpose();
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon();
    let cap = sweep_cap(m, n);

    let mut converged = n == 1;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= cap {
            return Err(Error::NoConvergence { algorithm: "one-sided Jacobi SVD", sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(w.row(p), w.row(p));
                let beta = dot(w.row(q), w.row(q));
                let gamma = dot(w.row(p), w.row(q));
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let mut sigma: Vec<T> = (0..n).map(|p| dot(w.row(p), w.row(p)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite singular values").then(i.cmp(&j)));

    let s_max = sigma[order[0]];
    let floor = s_max * eps * T::from_count(m.max(n));
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    for &p in &order {
        let sp = sigma[p];
        let col: Vec<T> = if sp > floor {
            w.row(p).iter().map(|&x| x / sp).collect()
        } else {
            sigma[p] = T::zero();
            vec![T::zero(); m]
        };
        u_cols.push(col);
    }
    orthonormalize_columns(&mut u_cols, m);

    let s: Vec<T> = order.iter().map(|&p| sigma[p]).collect();
    let u = Matrix::from_fn(m, n, |i, j| u_cols[j][i]);
    let vt = Matrix::from_fn(n, n, |i, j| v[(order[i], j)]);
    Ok(Svd { u, s, vt })
}

#[inline]
fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for k in 0..cols {
        let xp = data[p * cols + k];
        let xq = data[q * cols + k];
        data[p * cols + k] = c * xp - s * xq;
        data[q * cols + k] = s * xp + c * xq;
    }
}

/// Modified Gram-Schmidt in the given order. Columns that vanish (zero
/// singular values, or lost to cancellation) are replaced by the first
/// standard basis vector that is independent of the columns kept so far.
fn orthonormalize_columns<T: Scalar>(cols: &mut [Vec<T>], m: usize) {
    let mut basis_next = 0;
    for j in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        let initial = dot(col, col).sqrt();
        for _ in 0..2 {
            for prev in done.iter() {
                let proj = dot(prev, col);
                col.iter_mut().zip(prev).for_each(|(c, &p)| *c -= proj * p);
            }
        }
        let mut norm = dot(col, col).sqrt();
        if initial == T::zero() || norm < T::lit(0.5) * initial {
            loop {
                assert!(basis_next < m, "ran out of basis vectors while completing U");
                col.iter_mut().for_each(|c| *c = T::zero());
                col[basis_next] = T::one();
                basis_next += 1;
                for _ in 0..2 {
                    for prev in done.iter() {
                        let proj = dot(prev, col);
                        col.iter_mut().zip(prev).for_each(|(c, &p)| *c -= proj * p);
                    }
                }
                norm = dot(col, col).sqrt();
                if norm > T::lit(0.5) {
                    break;
                }
            }
        }
        col.iter_mut().for_each(|c| *c /= norm);
    }
}

fn fix_signs<T: Scalar>(svd: &mut Svd<T>) {
    let tol = T::epsilon().sqrt();
    let (m, k) = svd.u.shape();
    for j in 0..k {
        let lead = (0..m).map(|i| svd.u[(i, j)]).find(|x| x.abs() > tol);
        if matches!(lead, Some(x) if x < T::zero()) {
            for i in 0..m {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for x in svd.vt.row_mut(j) {
                *x = -*x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn orthonormality_error(q: &Matrix<f64>) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
    }

    fn rel_frob(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        let d = a.sub(b).unwrap();
        crate::linalg::frobenius_norm(&d) / crate::linalg::frobenius_norm(a).max(1e-300)
    }

    #[test]
    fn diagonal_input() {
        let a = Matrix::<f64>::diag(&[3.0, 1.0]);
        let s = svd(&a).unwrap().s;
        assert_eq!(s, vec![3.0, 1.0]);
        let b = Matrix::<f64>::diag(&[1.0, 3.0]);
        assert_eq!(svd(&b).unwrap().s, vec![3.0, 1.0]);
    }

    #[test]
    fn permutation_matrix_has_unit_singular_values() {
        let a = Matrix::<f64>::from_f64_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let s = svd(&a).unwrap().s;
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstructs_random_inputs_all_shapes() {
        for (seed, (m, n)) in [(6, 4), (4, 6), (1, 5), (5, 1), (7, 7), (3, 9)].into_iter().enumerate() {
            let a = random(m, n, seed as u64);
            let f = svd(&a).unwrap();
            assert_eq!(f.u.shape(), (m, m.min(n)));
            assert_eq!(f.vt.shape(), (m.min(n), n));
            assert!(rel_frob(&a, &f.reconstruct()) < 1e-10);
            assert!(orthonormality_error(&f.u) < 1e-10);
            assert!(orthonormality_error(&f.vt.transpose()) < 1e-10);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(f.s.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_u() {
        // Rank 1: every row is a multiple of (1, 2, 3).
        let a = Matrix::<f64>::from_f64_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[-1.0, -2.0, -3.0], &[0.0, 0.0, 0.0]])
            .unwrap();
        let f = svd(&a).unwrap();
        assert!(f.s[1] < 1e-12 && f.s[2] < 1e-12);
        assert!(orthonormality_error(&f.u) < 1e-10);
        assert!(rel_frob(&a, &f.reconstruct()) < 1e-10);

        let z = Matrix::<f64>::zeros(3, 2);
        let f = svd(&z).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&f.u) < 1e-12);
    }

    #[test]
    fn sign_convention_is_applied() {
        for seed in 0..5 {
            let a = random(5, 3, seed).scale(-1.0);
            let f = svd(&a).unwrap();
            for j in 0..3 {
                let lead = (0..5).map(|i| f.u[(i, j)]).find(|x| x.abs() > 1e-8).unwrap();
                assert!(lead > 0.0);
            }
            // Same input, same bits.
            let g = svd(&a).unwrap();
            assert_eq!(f.u.as_slice(), g.u.as_slice());
            assert_eq!(f.s, g.s);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let a = random(6, 4, 3).cast::<f32>();
        let f = svd(&a).unwrap();
        let r = f.reconstruct().sub(&a).unwrap().max_abs();
        assert!(r < 1e-5, "f32 reconstruction error {r}");
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(svd(&Matrix::<f64>::zeros(0, 3)).is_err());
    }
}
