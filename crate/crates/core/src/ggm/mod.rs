//! Sparse Gaussian graphical model mixture trained with collaborative
//! dictionary learning.
//!
//! The `K` patterns `(μ_k, Λ_k)` are shared by every participant, while the
//! mixture weights `π^s` and responsibilities stay private. One round is
//! `local_update` (E-step and local sufficient statistics) → network-wide
//! aggregation through consensus → pruning of empty patterns →
//! `optimize_global` (MAP means and graphical lasso precisions), run by
//! every participant on its own copy of the aggregates.

mod checkpoint;
mod em;
mod glasso;
mod score;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::consensus::ConsensusError;
use crate::scalar::{ln_two_pi, Real};

pub use checkpoint::GgmCheckpoint;
pub use em::{
    aggregate, collab_round, fit, fit_from, initialize, local_update, log_posterior,
    map_mean_and_scatter, optimize_global, prune, responsibilities, AggregateRound, CollabState,
    GgmConfig, GgmFit, RoundRecord,
};
pub use glasso::{
    graphical_lasso, kkt_residual, logdet_weight, off_diagonal_nonzeros, GlassoOptions,
    GlassoSolution,
};
pub use score::{anomaly_score, GgmScorer};

#[derive(Debug, Error)]
pub enum GgmError {
    #[error("participant dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("precision matrix of component {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("every component was pruned (max count {max_count} < delta {delta})")]
    ModelCollapse { max_count: f64, delta: f64 },
    #[error("numerical conditioning failure (component {component:?}): {detail}")]
    NumericalConditioning {
        component: Option<usize>,
        detail: String,
    },
    #[error("graphical lasso did not converge after {sweeps} sweeps")]
    GlassoNotConverged { sweeps: usize },
    #[error("participants disagree after aggregation: {0}")]
    InconsistentViews(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

/// Prior hyper-parameters agreed on by all participants.
#[derive(Clone, Debug, PartialEq)]
pub struct GgmHyper<T: Real> {
    /// Strength of the Gaussian prior on each mean (`λ0 > 0`).
    pub lambda0: T,
    /// Prior mean of every pattern center.
    pub m0: DVector<T>,
    /// ℓ1 penalty on precision matrices (`ρ ≥ 0`).
    pub rho: T,
    /// Patterns whose network-wide count falls below `delta` are pruned.
    pub delta: T,
}

impl<T: Real> GgmHyper<T> {
    pub fn with_dim(dim: usize) -> Self {
        Self {
            lambda0: T::one(),
            m0: DVector::zeros(dim),
            rho: T::lit(0.1),
            delta: T::one(),
        }
    }

    pub fn validate(&self) -> Result<(), GgmError> {
        if !(self.lambda0 > T::zero()) {
            return Err(GgmError::InvalidConfig("lambda0 must be positive".into()));
        }
        if self.rho < T::zero() {
            return Err(GgmError::InvalidConfig("rho must be non-negative".into()));
        }
        if !(self.delta > T::zero()) {
            return Err(GgmError::InvalidConfig("delta must be positive".into()));
        }
        Ok(())
    }
}

/// Shared pattern dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct GgmGlobal<T: Real> {
    pub means: Vec<DVector<T>>,
    pub precisions: Vec<DMatrix<T>>,
    pub hyper: GgmHyper<T>,
}

impl<T: Real> GgmGlobal<T> {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.hyper.m0.len()
    }

    /// Keeps only the listed components, in order.
    pub fn retain(&self, keep: &[usize]) -> Self {
        Self {
            means: keep.iter().map(|&k| self.means[k].clone()).collect(),
            precisions: keep.iter().map(|&k| self.precisions[k].clone()).collect(),
            hyper: self.hyper.clone(),
        }
    }

    /// Factorizes every precision; fails if one is not positive definite.
    pub fn components(&self) -> Result<Vec<GaussianComponent<T>>, GgmError> {
        if self.means.len() != self.precisions.len() {
            return Err(GgmError::DimensionMismatch(format!(
                "{} means vs {} precisions",
                self.means.len(),
                self.precisions.len()
            )));
        }
        self.means
            .iter()
            .zip(&self.precisions)
            .enumerate()
            .map(|(k, (mu, lam))| {
                if mu.len() != self.dim() || lam.shape() != (self.dim(), self.dim()) {
                    return Err(GgmError::DimensionMismatch(format!(
                        "component {k} does not match dimension {}",
                        self.dim()
                    )));
                }
                GaussianComponent::new(mu.clone(), lam.clone())
                    .ok_or(GgmError::NotPositiveDefinite(k))
            })
            .collect()
    }
}

/// Participant-private state.
#[derive(Clone, Debug, PartialEq)]
pub struct GgmLocal<T: Real> {
    /// `π^s`, on the simplex.
    pub weights: DVector<T>,
    /// `N^s x K`; row `n` is sample `n`'s pattern posterior.
    pub responsibilities: DMatrix<T>,
}

impl<T: Real> GgmLocal<T> {
    pub fn uniform(k: usize, n: usize) -> Self {
        let p = T::one() / T::from_usize_lossy(k);
        Self {
            weights: DVector::from_element(k, p),
            responsibilities: DMatrix::from_element(n, k, p),
        }
    }

    /// Keeps the listed components and renormalizes the weights.
    pub fn retain(&self, keep: &[usize]) -> Self {
        let mut weights = DVector::from_fn(keep.len(), |i, _| self.weights[keep[i]]);
        let total = weights.sum();
        if total > T::zero() {
            weights /= total;
        } else {
            weights.fill(T::one() / T::from_usize_lossy(keep.len()));
        }
        let responsibilities = DMatrix::from_fn(self.responsibilities.nrows(), keep.len(), |n, i| {
            self.responsibilities[(n, keep[i])]
        });
        Self {
            weights,
            responsibilities,
        }
    }
}

/// Per-participant sufficient statistics: `N^s_k`, `m^s_k = Σ r x`,
/// `C^s_k = Σ r x xᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffStats<T: Real> {
    pub counts: Vec<T>,
    pub first_moments: Vec<DVector<T>>,
    pub second_moments: Vec<DMatrix<T>>,
}

impl<T: Real> SuffStats<T> {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.first_moments.first().map_or(0, |m| m.len())
    }

    /// Length of [`SuffStats::flatten`]: `K (1 + M + M(M+1)/2)`.
    pub fn flat_len(k: usize, m: usize) -> usize {
        k * (1 + m + m * (m + 1) / 2)
    }

    /// Packs counts, first moments and the upper triangle of the second
    /// moments into one vector for batched consensus.
    pub fn flatten(&self) -> Vec<T> {
        let m = self.dim();
        let mut out = Vec::with_capacity(Self::flat_len(self.k(), m));
        for k in 0..self.k() {
            out.push(self.counts[k]);
            out.extend(self.first_moments[k].iter().copied());
            for i in 0..m {
                for j in i..m {
                    out.push(self.second_moments[k][(i, j)]);
                }
            }
        }
        out
    }

    pub fn unflatten(flat: &[T], k: usize, m: usize) -> Self {
        assert_eq!(flat.len(), Self::flat_len(k, m), "flattened stats length");
        let mut it = flat.iter().copied();
        let mut counts = Vec::with_capacity(k);
        let mut first_moments = Vec::with_capacity(k);
        let mut second_moments = Vec::with_capacity(k);
        for _ in 0..k {
            counts.push(it.next().unwrap());
            first_moments.push(DVector::from_iterator(m, it.by_ref().take(m)));
            let mut c = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in i..m {
                    let v = it.next().unwrap();
                    c[(i, j)] = v;
                    c[(j, i)] = v;
                }
            }
            second_moments.push(c);
        }
        Self {
            counts,
            first_moments,
            second_moments,
        }
    }
}

/// Network-wide statistics: `N̄_k = Σ_s N^s_k`, `m̄_k = Σ_s m^s_k / N̄_k`,
/// `C̄_k = Σ_s C^s_k / N̄_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregates<T: Real> {
    pub counts: Vec<T>,
    pub means: Vec<DVector<T>>,
    pub scatter: Vec<DMatrix<T>>,
}

impl<T: Real> Aggregates<T> {
    /// Normalizes network-wide sums. Components with a non-positive count
    /// get zero moments and are left for pruning.
    pub fn from_sums(sums: &SuffStats<T>) -> Self {
        let m = sums.dim();
        let mut means = Vec::with_capacity(sums.k());
        let mut scatter = Vec::with_capacity(sums.k());
        for k in 0..sums.k() {
            let n = sums.counts[k];
            if n > T::zero() {
                means.push(&sums.first_moments[k] / n);
                scatter.push(&sums.second_moments[k] / n);
            } else {
                means.push(DVector::zeros(m));
                scatter.push(DMatrix::zeros(m, m));
            }
        }
        Self {
            counts: sums.counts.clone(),
            means,
            scatter,
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn retain(&self, keep: &[usize]) -> Self {
        Self {
            counts: keep.iter().map(|&k| self.counts[k]).collect(),
            means: keep.iter().map(|&k| self.means[k].clone()).collect(),
            scatter: keep.iter().map(|&k| self.scatter[k].clone()).collect(),
        }
    }

    /// Components flagged for pruning (`N̄_k ≤ 0`).
    pub fn flagged(&self) -> Vec<usize> {
        (0..self.k())
            .filter(|&k| !(self.counts[k] > T::zero()))
            .collect()
    }
}

/// `N(μ, Λ^{-1})` with a cached Cholesky factor of the precision.
#[derive(Clone, Debug)]
pub struct GaussianComponent<T: Real> {
    pub mean: DVector<T>,
    pub precision: DMatrix<T>,
    chol_lower: DMatrix<T>,
    log_det: T,
}

impl<T: Real> GaussianComponent<T> {
    /// `None` if the precision is not positive definite.
    pub fn new(mean: DVector<T>, precision: DMatrix<T>) -> Option<Self> {
        let chol = precision.clone().cholesky()?;
        let l = chol.l();
        let log_det = l
            .diagonal()
            .iter()
            .fold(T::zero(), |a, &d| a + d.ln())
            * T::lit(2.0);
        Some(Self {
            mean,
            precision,
            chol_lower: l,
            log_det,
        })
    }

    pub fn log_det_precision(&self) -> T {
        self.log_det
    }

    /// `(x − μ)ᵀ Λ (x − μ)`.
    pub fn mahalanobis_sq(&self, x: &DVector<T>) -> T {
        let d = x - &self.mean;
        (self.chol_lower.transpose() * d).norm_squared()
    }

    /// `ln N(x | μ, Λ^{-1})`.
    pub fn log_density(&self, x: &DVector<T>) -> T {
        let m = T::from_usize_lossy(self.mean.len());
        let half = T::lit(0.5);
        -half * m * ln_two_pi::<T>() + half * self.log_det - half * self.mahalanobis_sq(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_density_standard_normal_at_zero() {
        let c = GaussianComponent::new(DVector::zeros(1), DMatrix::<f64>::identity(1, 1)).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((c.log_density(&DVector::zeros(1)) - expected).abs() < 1e-15);
    }

    #[test]
    fn log_density_matches_direct_formula() {
        let lam = DMatrix::from_row_slice(2, 2, &[2.0f64, 0.5, 0.5, 1.0]);
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        let x = DVector::from_vec(vec![0.3, 0.2]);
        let c = GaussianComponent::new(mu.clone(), lam.clone()).unwrap();
        let d = &x - &mu;
        let direct = -(2.0 * std::f64::consts::PI).ln() + 0.5 * lam.determinant().ln()
            - 0.5 * (d.transpose() * &lam * &d)[(0, 0)];
        assert!((c.log_density(&x) - direct).abs() < 1e-13);
    }

    #[test]
    fn indefinite_precision_rejected() {
        let lam = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianComponent::new(DVector::zeros(2), lam).is_none());
    }

    #[test]
    fn stats_flatten_roundtrip() {
        let stats = SuffStats {
            counts: vec![1.0, 2.0],
            first_moments: vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])],
            second_moments: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
                DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 4.0]),
            ],
        };
        let flat = stats.flatten();
        assert_eq!(flat.len(), SuffStats::<f64>::flat_len(2, 2));
        assert_eq!(SuffStats::unflatten(&flat, 2, 2), stats);
    }

    #[test]
    fn local_retain_renormalizes() {
        let mut local = GgmLocal::<f64>::uniform(4, 2);
        local.weights = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let kept = local.retain(&[1, 3]);
        assert!((kept.weights[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((kept.weights[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(kept.responsibilities.shape(), (2, 2));
    }

    #[test]
    fn zero_count_components_are_flagged() {
        let sums = SuffStats {
            counts: vec![0.0, 3.0],
            first_moments: vec![DVector::zeros(1), DVector::from_element(1, 6.0)],
            second_moments: vec![DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 15.0)],
        };
        let agg = Aggregates::from_sums(&sums);
        assert_eq!(agg.flagged(), vec![0]);
        assert_eq!(agg.means[1][0], 2.0);
        assert_eq!(agg.scatter[1][(0, 0)], 5.0);
    }
}
