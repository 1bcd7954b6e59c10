//! Graphical lasso for the weighted precision objective
//!
//! ```text
//! maximize  b ln|Λ| - Tr(ΛΣ) - (ρ/N) ||Λ||_1,    b = (N + 1)/N
//! ```
//!
//! Dividing by `b` turns it into the standard form with covariance `Σ/b` and
//! penalty `ρ/(N + 1)`, solved by block coordinate descent over columns with
//! a soft-threshold coordinate descent for each column's lasso subproblem.
//! The diagonal is penalized too.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GgmError;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlassoOptions {
    /// Maximum outer sweeps over all columns.
    pub max_sweeps: usize,
    /// Stop when no entry of the working covariance moves by more than
    /// `tol * mean|diag|` during a sweep.
    pub tol: f64,
    /// Coordinate-descent passes per column subproblem.
    pub max_inner: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10_000,
            tol: 1e-13,
            max_inner: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlassoSolution<T: Real> {
    pub precision: DMatrix<T>,
    /// Working estimate of `Λ^{-1}`.
    pub covariance: DMatrix<T>,
    pub sweeps: usize,
}

/// `b = (N + 1)/N`, the weight on `ln|Λ|`.
pub fn logdet_weight<T: Real>(count: T) -> T {
    (count + T::one()) / count
}

fn soft_threshold<T: Real>(x: T, t: T) -> T {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        T::zero()
    }
}

/// Solves the weighted graphical lasso for one component.
pub fn graphical_lasso<T: Real>(
    sigma: &DMatrix<T>,
    rho: T,
    count: T,
    opts: &GlassoOptions,
) -> Result<GlassoSolution<T>, GgmError> {
    let m = sigma.nrows();
    if sigma.ncols() != m || m == 0 {
        return Err(GgmError::DimensionMismatch(format!(
            "covariance must be square and non-empty, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if !(count > T::zero()) || rho < T::zero() {
        return Err(GgmError::InvalidConfig(format!(
            "graphical lasso needs N > 0 and rho >= 0 (N = {count}, rho = {rho})"
        )));
    }
    let b = logdet_weight(count);
    let s = sigma.map(|v| v / b);
    let pen = rho / (count + T::one());

    let mut w = s.clone();
    for i in 0..m {
        w[(i, i)] += pen;
        if !(w[(i, i)] > T::zero()) {
            return Err(GgmError::NumericalConditioning {
                component: None,
                detail: format!("non-positive diagonal {} at {i}", w[(i, i)]),
            });
        }
    }
    // Column j's coefficients, indexed over the other m-1 coordinates.
    let mut betas: Vec<DVector<T>> = vec![DVector::zeros(m.saturating_sub(1)); m];
    let scale = (0..m).fold(T::zero(), |a, i| a + w[(i, i)].abs()) / T::from_usize_lossy(m);
    let tol = T::lit(opts.tol) * scale;

    let mut sweeps = 0;
    if m > 1 {
        loop {
            if sweeps >= opts.max_sweeps {
                return Err(GgmError::GlassoNotConverged { sweeps });
            }
            sweeps += 1;
            let mut max_change = T::zero();
            for j in 0..m {
                let others: Vec<usize> = (0..m).filter(|&i| i != j).collect();
                let w11 = DMatrix::from_fn(m - 1, m - 1, |a, c| w[(others[a], others[c])]);
                let s12 = DVector::from_fn(m - 1, |a, _| s[(others[a], j)]);
                let beta = &mut betas[j];
                lasso_cd(&w11, &s12, pen, beta, tol, opts.max_inner);
                let w12 = &w11 * &*beta;
                for (a, &i) in others.iter().enumerate() {
                    max_change = max_change.max((w[(i, j)] - w12[a]).abs());
                    w[(i, j)] = w12[a];
                    w[(j, i)] = w12[a];
                }
            }
            if max_change < tol {
                break;
            }
        }
    }

    let mut precision = DMatrix::<T>::zeros(m, m);
    for j in 0..m {
        let others: Vec<usize> = (0..m).filter(|&i| i != j).collect();
        let beta = &betas[j];
        let w12 = DVector::from_fn(m - 1, |a, _| w[(others[a], j)]);
        let denom = w[(j, j)] - w12.dot(beta);
        if !(denom > T::zero()) {
            return Err(GgmError::NumericalConditioning {
                component: None,
                detail: format!("non-positive Schur complement {denom} in column {j}"),
            });
        }
        let diag = T::one() / denom;
        precision[(j, j)] = diag;
        for (a, &i) in others.iter().enumerate() {
            precision[(i, j)] = -beta[a] * diag;
        }
    }
    let precision = (&precision + precision.transpose()) * T::lit(0.5);
    Ok(GlassoSolution {
        precision,
        covariance: w,
        sweeps,
    })
}

/// Coordinate descent for `min ½βᵀVβ − βᵀu + t‖β‖₁`, warm-started at `beta`.
fn lasso_cd<T: Real>(
    v: &DMatrix<T>,
    u: &DVector<T>,
    t: T,
    beta: &mut DVector<T>,
    tol: T,
    max_passes: usize,
) {
    let n = u.len();
    for _ in 0..max_passes {
        let mut max_delta = T::zero();
        for i in 0..n {
            let mut r = u[i];
            for l in 0..n {
                if l != i {
                    r -= v[(i, l)] * beta[l];
                }
            }
            let new = soft_threshold(r, t) / v[(i, i)];
            max_delta = max_delta.max((new - beta[i]).abs());
            beta[i] = new;
        }
        if max_delta < tol {
            break;
        }
    }
}

/// Largest violation of the optimality conditions
/// `b (Λ^{-1})_ij − Σ_ij = (ρ/N) sign(Λ_ij)` (nonzero entries) and
/// `|b (Λ^{-1})_ij − Σ_ij| ≤ ρ/N` (zero entries).
pub fn kkt_residual<T: Real>(precision: &DMatrix<T>, sigma: &DMatrix<T>, rho: T, count: T) -> T {
    let b = logdet_weight(count);
    let inv = match precision.clone().cholesky() {
        Some(c) => c.inverse(),
        None => return T::lit(f64::INFINITY),
    };
    let pen = rho / count;
    let m = precision.nrows();
    let mut worst = T::zero();
    for i in 0..m {
        for j in 0..m {
            let g = b * inv[(i, j)] - sigma[(i, j)];
            let lam = precision[(i, j)];
            let viol = if lam == T::zero() {
                (g.abs() - pen).max(T::zero())
            } else {
                (g - pen * lam.signum()).abs()
            };
            worst = worst.max(viol);
        }
    }
    worst
}

/// Off-diagonal entries with `|Λ_ij| > threshold`, counted over `i < j`.
pub fn off_diagonal_nonzeros<T: Real>(precision: &DMatrix<T>, threshold: T) -> usize {
    let m = precision.nrows();
    (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .filter(|&(i, j)| precision[(i, j)].abs() > threshold)
        .count()
}
