//! Collapse and capacity diagnostics on embedding matrices.
//!
//! All spectra come from the autocorrelation `A = ZᵀZ/N` of an N×D matrix of
//! unit rows, so `trace(A) = 1` and the eigenvalues form a distribution.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{nuclear_norm, sym_eig, Matrix};
use crate::scalar::Scalar;

/// Eigenvalues at or above this (negative) level are treated as rounding
/// noise and clamped to zero.
const NEGATIVE_CLAMP: f64 = -1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Autocorrelation eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub entropy: f64,
    pub effective_rank_99: usize,
    pub frobenius_to_identity: f64,
    pub nuclear_norm: f64,
    pub manifold_radius: f64,
    pub manifold_dim: f64,
    pub capacity_load: f64,
    pub capacity: f64,
}

/// Geometric statistics of a point manifold's covariance spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldStats {
    pub radius: f64,
    pub dim: f64,
    pub capacity_load: f64,
    pub capacity: f64,
}

/// `ZᵀZ / N`.
pub fn autocorrelation<T: Scalar>(z: &Matrix<T>) -> Result<Matrix<T>> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(Error::invalid("autocorrelation of an empty matrix"));
    }
    Ok(z.t_matmul(z)?.scale(T::one() / T::from_count(z.rows())))
}

/// Clamps rounding-level negatives to zero; rejects anything more negative.
fn clamp_spectrum<T: Scalar>(eigenvalues: &[T]) -> Result<Vec<T>> {
    eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !v.is_finite() {
                Err(Error::NonFinite("spectrum"))
            } else if v < T::lit(NEGATIVE_CLAMP) {
                Err(Error::invalid(format!("eigenvalue {i} is negative ({v})")))
            } else {
                Ok(v.max(T::zero()))
            }
        })
        .collect()
}

/// `-Σ λ log λ` with `0 log 0 = 0`. The spectrum must sum to 1 within 1e-3.
pub fn von_neumann_entropy<T: Scalar>(eigenvalues: &[T]) -> Result<T> {
    let lam = clamp_spectrum(eigenvalues)?;
    let total: T = lam.iter().copied().sum();
    if (total - T::one()).abs() > T::lit(1e-3) {
        return Err(Error::invalid(format!(
            "entropy needs a trace-1 spectrum, eigenvalues sum to {total}; normalize the rows first"
        )));
    }
    Ok(-lam.iter().filter(|&&v| v > T::zero()).map(|&v| v * v.ln()).sum::<T>())
}

/// Smallest `m` whose leading `m` eigenvalues hold 99% of the total.
/// Expects a descending spectrum.
pub fn effective_rank_99<T: Scalar>(eigenvalues: &[T]) -> Result<usize> {
    let lam = clamp_spectrum(eigenvalues)?;
    let total: T = lam.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::invalid("effective rank of an all-zero spectrum"));
    }
    let target = T::lit(0.99) * total;
    let mut acc = T::zero();
    for (i, &v) in lam.iter().enumerate() {
        acc += v;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    // Only reachable through rounding in the running sum.
    Ok(lam.len())
}

/// `‖A − c·I‖_F²` with `c = trace(A)/D`.
pub fn frobenius_to_identity<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    if !a.is_square() || a.rows() == 0 {
        return Err(Error::shape("frobenius_to_identity", format!("{:?} is not square", a.shape())));
    }
    let c = a.trace() / T::from_count(a.rows());
    let mut total = T::zero();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let d = if i == j { a[(i, j)] - c } else { a[(i, j)] };
            total += d * d;
        }
    }
    Ok(total)
}

/// Capacity link function, decreasing in the load.
pub fn capacity_phi(load: f64) -> f64 {
    1.0 / (1.0 + load * load)
}

/// Radius `√(Σλ²/P)`, dimension `(Σλ)²/Σλ²`, load `R·√D` and capacity
/// `φ(load)`. The spectrum is zero-padded or truncated to `point_count`
/// entries before the sums.
pub fn manifold_stats<T: Scalar>(eigenvalues: &[T], point_count: usize) -> Result<ManifoldStats> {
    if point_count == 0 {
        return Err(Error::invalid("manifold_stats needs at least one point"));
    }
    let lam = clamp_spectrum(eigenvalues)?;
    let lam: Vec<f64> = lam.iter().take(point_count).map(|v| v.to_f64_lossy()).collect();
    let s1: f64 = lam.iter().sum();
    let s2: f64 = lam.iter().map(|v| v * v).sum();
    if s2 <= 0.0 {
        return Err(Error::invalid("manifold_stats of an all-zero spectrum"));
    }
    let radius = (s2 / point_count as f64).sqrt();
    let dim = s1 * s1 / s2;
    let capacity_load = radius * dim.sqrt();
    Ok(ManifoldStats { radius, dim, capacity_load, capacity: capacity_phi(capacity_load) })
}

/// Rejects rows whose norm is off 1 by more than `tol`.
pub fn check_unit_rows<T: Scalar>(z: &Matrix<T>, tol: f64) -> Result<()> {
    for (i, n) in z.row_norms().into_iter().enumerate() {
        let n = n.to_f64_lossy();
        if (n - 1.0).abs() > tol {
            return Err(Error::invalid(format!("row {i} has norm {n}, expected unit rows")));
        }
    }
    Ok(())
}

/// Full diagnostic report for unit-row embeddings.
pub fn spectral_report<T: Scalar>(z: &Matrix<T>) -> Result<SpectralReport> {
    check_unit_rows(z, 1e-6)?;
    let a = autocorrelation(z)?;
    let eig = sym_eig(&a)?;
    let eigenvalues: Vec<f64> = clamp_spectrum(&eig.values)?.iter().map(|v| v.to_f64_lossy()).collect();
    let stats = manifold_stats(&eigenvalues, z.rows())?;
    Ok(SpectralReport {
        entropy: von_neumann_entropy(&eigenvalues)?,
        effective_rank_99: effective_rank_99(&eigenvalues)?,
        frobenius_to_identity: frobenius_to_identity(&a)?.to_f64_lossy(),
        nuclear_norm: nuclear_norm(z)?.to_f64_lossy(),
        manifold_radius: stats.radius,
        manifold_dim: stats.dim,
        capacity_load: stats.capacity_load,
        capacity: stats.capacity,
        eigenvalues,
    })
}

/// Scalars of a report, for the JSON sidecar of a spectrum dump.
#[derive(Serialize)]
struct ReportScalars<'a> {
    entropy: f64,
    effective_rank_99: usize,
    frobenius_to_identity: f64,
    nuclear_norm: f64,
    manifold_radius: f64,
    manifold_dim: f64,
    capacity_load: f64,
    capacity: f64,
    spectrum_csv: &'a str,
}

/// Writes `<stem>.csv` with columns `index,eigenvalue` and `<stem>.json`
/// with the report scalars.
pub fn write_spectrum(report: &SpectralReport, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("index,eigenvalue\n");
    for (i, v) in report.eigenvalues.iter().enumerate() {
        csv.push_str(&format!("{i},{v:.17e}\n"));
    }
    let csv_name = format!("{stem}.csv");
    fs::write(dir.join(&csv_name), csv)?;
    let scalars = ReportScalars {
        entropy: report.entropy,
        effective_rank_99: report.effective_rank_99,
        frobenius_to_identity: report.frobenius_to_identity,
        nuclear_norm: report.nuclear_norm,
        manifold_radius: report.manifold_radius,
        manifold_dim: report.manifold_dim,
        capacity_load: report.capacity_load,
        capacity: report.capacity,
        spectrum_csv: &csv_name,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&scalars)?)?;
    Ok(())
}

/// Rows drawn uniformly from the unit sphere in `d` dimensions.
pub fn uniform_sphere<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Matrix<f64> {
    loop {
        let g = Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        if let Ok(z) = g.normalize_rows() {
            return z;
        }
    }
}

/// Large-size limit of `‖Z‖_*/√(N·D)` for `N×D` uniform-sphere rows.
///
/// Rows are nearly Gaussian with variance `1/D`, so the singular values
/// follow the Marchenko–Pastur law with ratio `ρ = min/max`. The limit is
/// `E[√λ]` under that law, times `√ρ` when `N < D`.
pub fn uniform_nuclear_ratio_limit(n: usize, d: usize) -> f64 {
    let (p, q) = (n.min(d) as f64, n.max(d) as f64);
    let rho = p / q;
    let (a, b) = ((1.0 - rho.sqrt()).powi(2), (1.0 + rho.sqrt()).powi(2));
    // λ = a + (b−a)(1−cos θ)/2 removes the square-root endpoints.
    let half = (b - a) / 2.0;
    let f = |theta: f64| {
        let lam = a + half * (1.0 - theta.cos());
        if lam <= 0.0 {
            return 0.0;
        }
        lam.sqrt() * half * half * theta.sin().powi(2) / (2.0 * PI * rho * lam)
    };
    let steps = 4000;
    let h = PI / steps as f64;
    let mut acc = f(0.0) + f(PI);
    for k in 1..steps {
        acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    let mean_sqrt = acc * h / 3.0;
    if n < d {
        rho.sqrt() * mean_sqrt
    } else {
        mean_sqrt
    }
}

/// Acceptance band for the uniform-sphere ratio: the large-size limit
/// widened by a finite-size allowance.
pub fn uniform_nuclear_ratio_band(n: usize, d: usize) -> (f64, f64) {
    let mid = uniform_nuclear_ratio_limit(n, d);
    let slack = 0.02 + 1.0 / n.min(d) as f64;
    ((mid - slack).max(0.0), (mid + slack).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    /// Named measured quantities behind the verdict.
    pub measured: Vec<(String, f64)>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
    pub all_passed: bool,
}

fn check(name: &str, passed: bool, measured: &[(&str, f64)], detail: impl Into<String>) -> TheoryCheck {
    TheoryCheck {
        name: name.to_string(),
        passed,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        detail: detail.into(),
    }
}

fn failed(name: &str, err: Error) -> TheoryCheck {
    check(name, false, &[], format!("error: {err}"))
}

/// Mean of the rows of `views`.
pub fn centroid(views: &Matrix<f64>) -> Vec<f64> {
    let k = views.rows() as f64;
    (0..views.cols()).map(|j| (0..views.rows()).map(|i| views[(i, j)]).sum::<f64>() / k).collect()
}

/// Executable checks on unit-row embeddings `z`:
///
/// * `entropy_rank_bound`: `log(effective_rank_99) ≥ Ĥ(A)`
/// * `nuclear_norm_bounds`: `0 ≤ ‖Z‖_* ≤ √(N·min(N,D))`
/// * `identical_views_centroid`: the mean of K copies of any row has norm 1
/// * `uniform_sphere_band`: uniform rows of the same shape land in the
///   expected nuclear-norm band (uses `seed`)
///
/// Failures are reported, never raised.
pub fn verify_theory(z: &Matrix<f64>, seed: u64) -> TheoryReport {
    let (n, d) = z.shape();
    let mut checks = Vec::new();

    checks.push(match spectral_report(z) {
        Ok(r) => {
            let lhs = (r.effective_rank_99 as f64).ln();
            check(
                "entropy_rank_bound",
                lhs >= r.entropy - 1e-9,
                &[("log_rank", lhs), ("entropy", r.entropy)],
                "log(effective_rank_99) >= entropy - 1e-9",
            )
        }
        Err(e) => failed("entropy_rank_bound", e),
    });

    checks.push(match nuclear_norm(z) {
        Ok(nn) => {
            let upper = ((n * n.min(d)) as f64).sqrt();
            check(
                "nuclear_norm_bounds",
                nn >= 0.0 && nn <= upper + 1e-9 * upper.max(1.0),
                &[("nuclear_norm", nn), ("upper_bound", upper)],
                "0 <= ||Z||_* <= sqrt(N min(N, D))",
            )
        }
        Err(e) => failed("nuclear_norm_bounds", e),
    });

    let k = 8;
    let worst = (0..n)
        .map(|i| {
            let views = Matrix::from_fn(k, d, |_, j| z[(i, j)]);
            (crate::linalg::norm(&centroid(&views)) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    checks.push(check(
        "identical_views_centroid",
        worst <= 1e-12,
        &[("views", k as f64), ("max_norm_deviation", worst)],
        "centroid of identical unit views has norm 1 within 1e-12",
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = uniform_sphere(n, d, &mut rng);
    checks.push(match nuclear_norm(&u) {
        Ok(nn) => {
            let ratio = nn / ((n * d) as f64).sqrt();
            let (lo, hi) = uniform_nuclear_ratio_band(n, d);
            check(
                "uniform_sphere_band",
                (lo..=hi).contains(&ratio),
                &[("ratio", ratio), ("band_lo", lo), ("band_hi", hi)],
                "uniform rows: ||Z||_*/sqrt(N D) inside the Marchenko-Pastur band",
            )
        }
        Err(e) => failed("uniform_sphere_band", e),
    });

    let all_passed = checks.iter().all(|c| c.passed);
    TheoryReport { checks, all_passed }
}
