//! Privacy auditing of a trained GGM dictionary: the Gaussian posterior
//! released for each pattern mean, the resulting KL (Rényi, α = 1) budget
//! `ε = K B R² / (2 λ0)`, an empirical perturbation audit of that budget,
//! and entropy ℓ-diversity monitoring of each participant's data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ggm::{
    local_update, map_mean_and_scatter, Aggregates, GaussianComponent, GgmError, GgmGlobal,
    GgmLocal, SuffStats,
};
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("no root of the norm-bound equation: minimum value {min_value} > 0")]
    NoRoot { min_value: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Ggm(#[from] GgmError),
}

/// Posterior `N(μ_k | w_k, (λ_k Λ_k)^{-1})` of one pattern mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMu<T: Real> {
    pub mean: DVector<T>,
    pub lambda: T,
    pub precision: DMatrix<T>,
}

impl<T: Real> PosteriorMu<T> {
    pub fn covariance(&self) -> Option<DMatrix<T>> {
        self.precision.clone().cholesky().map(|c| c.inverse())
    }
}

pub fn posterior_mu<T: Real>(
    lambda0: T,
    m0: &DVector<T>,
    count: T,
    mean: &DVector<T>,
    precision: &DMatrix<T>,
) -> Result<PosteriorMu<T>, PrivacyError> {
    if !(lambda0 > T::zero()) {
        return Err(PrivacyError::NonPositive("lambda0"));
    }
    if count < T::zero() {
        return Err(PrivacyError::NonPositive("count"));
    }
    if precision.clone().cholesky().is_none() {
        return Err(PrivacyError::NotPositiveDefinite);
    }
    let lambda = lambda0 + count;
    Ok(PosteriorMu {
        mean: (m0 * lambda0 + mean * count) / lambda,
        lambda,
        precision: precision * lambda,
    })
}

/// `½ λ (w − w̃)ᵀ Λ (w − w̃)`, the KL divergence between two Gaussians with
/// common covariance `(λΛ)^{-1}`.
pub fn kl_same_cov<T: Real>(
    w: &DVector<T>,
    w_tilde: &DVector<T>,
    lambda: T,
    precision: &DMatrix<T>,
) -> Result<T, PrivacyError> {
    let chol = precision
        .clone()
        .cholesky()
        .ok_or(PrivacyError::NotPositiveDefinite)?;
    let d = w - w_tilde;
    let q = (chol.l().transpose() * d).norm_squared();
    Ok(T::lit(0.5) * lambda * q)
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(T::zero(), |a, v| a.max(v.abs()))
}

/// Constants of the norm-bound equation for one pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBoundInputs {
    /// Value of the lasso objective's linear part at `Λ = I`:
    /// `Tr Σ + (ρ/N̄) M`.
    pub f_at_identity: f64,
    /// `M (1 + 1/δ)`.
    pub b: f64,
    /// `ρ / (S max_s N^s)`.
    pub c: f64,
    /// `max_ij |Σ − I|_ij`.
    pub h: f64,
}

impl NormBoundInputs {
    pub fn new<T: Real>(
        sigma: &DMatrix<T>,
        count: T,
        rho: T,
        delta: T,
        participants: usize,
        max_local_count: usize,
    ) -> Self {
        let m = sigma.nrows();
        let mf = m as f64;
        let f = sigma.trace().as_f64() + rho.as_f64() / count.as_f64() * mf;
        let h = (sigma - DMatrix::<T>::identity(m, m)).amax().as_f64();
        Self {
            f_at_identity: f,
            b: mf * (1.0 + 1.0 / delta.as_f64()),
            c: rho.as_f64() / (participants as f64 * max_local_count as f64),
            h,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBound {
    pub bound: f64,
    /// `g(bound)`, the certificate residual.
    pub residual: f64,
}

/// `g(t) = t − a b ln t − a f` with `a = 1 + h/c`.
pub fn norm_bound_fn(t: f64, f_at_identity: f64, b: f64, c: f64, h: f64) -> f64 {
    let a = 1.0 + h / c;
    t - a * b * t.ln() - a * f_at_identity
}

/// Largest root of `g`. `g` is convex with its minimum at `t* = (1 + h/c) b`,
/// so the root is bracketed on `[t*, ∞)` by doubling and refined by
/// bisection, then polished over neighbouring floats.
pub fn lambda_norm_bound(
    f_at_identity: f64,
    b: f64,
    c: f64,
    h: f64,
) -> Result<NormBound, PrivacyError> {
    if !(b > 0.0) {
        return Err(PrivacyError::NonPositive("b"));
    }
    if !(c > 0.0) {
        return Err(PrivacyError::NonPositive("c"));
    }
    if h < 0.0 || !h.is_finite() || !f_at_identity.is_finite() {
        return Err(PrivacyError::NonPositive("h"));
    }
    let g = |t: f64| norm_bound_fn(t, f_at_identity, b, c, h);
    let t_min = (1.0 + h / c) * b;
    let g_min = g(t_min);
    if g_min > 1e-9 {
        return Err(PrivacyError::NoRoot { min_value: g_min });
    }
    if g_min >= -1e-9 {
        return Ok(NormBound {
            bound: t_min,
            residual: g_min,
        });
    }
    let mut lo = t_min;
    let mut hi = 2.0 * t_min;
    while g(hi) <= 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(PrivacyError::NoRoot { min_value: g_min });
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut best = hi;
    let mut t = lo;
    for _ in 0..64 {
        t = next_up(t);
        if g(t).abs() < g(best).abs() {
            best = t;
        }
    }
    Ok(NormBound {
        bound: best,
        residual: g(best),
    })
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub k: usize,
    pub bound: f64,
    pub radius: f64,
    pub lambda0: f64,
    pub delta: f64,
}

/// `ε = K B R² / (2 λ0)`.
pub fn epsilon_bound(
    k: usize,
    bound: f64,
    radius: f64,
    lambda0: f64,
    delta: f64,
) -> Result<PrivacyBudget, PrivacyError> {
    if k == 0 {
        return Err(PrivacyError::NonPositive("K"));
    }
    for (name, v) in [("B", bound), ("R", radius), ("lambda0", lambda0), ("delta", delta)] {
        if !(v > 0.0) {
            return Err(PrivacyError::NonPositive(name));
        }
    }
    Ok(PrivacyBudget {
        epsilon: k as f64 * bound * radius * radius / (2.0 * lambda0),
        k,
        bound,
        radius,
        lambda0,
        delta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Entropy of each pattern's sample-weight distribution.
    pub entropies: Vec<f64>,
    /// Largest of the entropies.
    pub max_entropy: f64,
    /// `ln ℓ0`.
    pub threshold: f64,
    pub pass: bool,
}

/// Shannon entropy of `g_k(n) ∝ N(x_n | center_k, Λ_k^{-1})` over the samples,
/// for each pattern. `pass` iff the largest entropy reaches `ln_threshold`.
pub fn entropy_diversity<T: Real>(
    data: &DMatrix<T>,
    centers: &[DVector<T>],
    precisions: &[DMatrix<T>],
    ln_threshold: f64,
) -> Result<DiversityReport, PrivacyError> {
    if data.nrows() == 0 {
        return Err(PrivacyError::EmptyDataset);
    }
    if centers.len() != precisions.len() {
        return Err(PrivacyError::DimensionMismatch("centers vs precisions".into()));
    }
    let mut entropies = Vec::with_capacity(centers.len());
    for (mu, lam) in centers.iter().zip(precisions) {
        if mu.len() != data.ncols() {
            return Err(PrivacyError::DimensionMismatch(format!(
                "center of length {} for {} features",
                mu.len(),
                data.ncols()
            )));
        }
        let comp = GaussianComponent::new(mu.clone(), lam.clone())
            .ok_or(PrivacyError::NotPositiveDefinite)?;
        let logs: Vec<f64> = (0..data.nrows())
            .map(|n| comp.log_density(&data.row(n).transpose()).as_f64())
            .collect();
        entropies.push(entropy_from_logs(&logs));
    }
    let max_entropy = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DiversityReport {
        entropies,
        max_entropy,
        threshold: ln_threshold,
        pass: max_entropy >= ln_threshold,
    })
}

/// Entropy of the distribution `∝ exp(logs)`, with `0 ln 0 = 0`.
pub fn entropy_from_logs(logs: &[f64]) -> f64 {
    let norm = crate::scalar::log_sum_exp(logs);
    let h = logs
        .iter()
        .map(|&l| {
            let lp = l - norm;
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Largest pairwise distance among the pooled samples after dropping those
/// whose distance to the coordinate-wise median exceeds its `quantile`.
pub fn pairwise_radius<T: Real>(datasets: &[DMatrix<T>], quantile: f64) -> f64 {
    let rows: Vec<Vec<f64>> = datasets
        .iter()
        .flat_map(|d| {
            (0..d.nrows()).map(move |n| d.row(n).iter().map(|v| v.as_f64()).collect())
        })
        .collect();
    if rows.len() < 2 {
        return 0.0;
    }
    let m = rows[0].len();
    let median: Vec<f64> = (0..m)
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            col[col.len() / 2]
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut to_median: Vec<f64> = rows.iter().map(|r| dist(r, &median)).collect();
    let mut sorted = to_median.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((quantile.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).ceil() as usize)
        .min(sorted.len() - 1);
    let cutoff = sorted[idx];
    let kept: Vec<&Vec<f64>> = rows
        .iter()
        .zip(to_median.iter_mut())
        .filter(|(_, d)| **d <= cutoff)
        .map(|(r, _)| r)
        .collect();
    let mut best = 0.0f64;
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            best = best.max(dist(kept[i], kept[j]));
        }
    }
    best
}

/// Result of the perturbation audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub trials: usize,
    pub passes: usize,
    pub violations: usize,
    pub max_kl: f64,
}

/// Per-pattern quantities the audit needs, recomputed from data under a
/// fixed model.
#[derive(Clone, Debug)]
pub struct PatternState<T: Real> {
    pub aggregates: Aggregates<T>,
    pub sigmas: Vec<DMatrix<T>>,
    /// Trained responsibilities per participant (`N^s x K`).
    pub responsibilities: Vec<DMatrix<T>>,
}

/// Evaluates responsibilities and pooled statistics of every participant
/// under the fixed model (weights `π^s` held by each participant).
pub fn pattern_state<T: Real>(
    datasets: &[DMatrix<T>],
    global: &GgmGlobal<T>,
    weights: &[DVector<T>],
) -> Result<PatternState<T>, PrivacyError> {
    if datasets.len() != weights.len() {
        return Err(PrivacyError::DimensionMismatch(format!(
            "{} datasets, {} weight vectors",
            datasets.len(),
            weights.len()
        )));
    }
    let (k, m) = (global.k(), global.dim());
    let mut sums = SuffStats {
        counts: vec![T::zero(); k],
        first_moments: vec![DVector::zeros(m); k],
        second_moments: vec![DMatrix::zeros(m, m); k],
    };
    let mut responsibilities = Vec::with_capacity(datasets.len());
    for (data, pi) in datasets.iter().zip(weights) {
        let local = GgmLocal {
            weights: pi.clone(),
            responsibilities: DMatrix::zeros(0, k),
        };
        let (fresh, st) = local_update(data, &local, global)?;
        for c in 0..k {
            sums.counts[c] += st.counts[c];
            sums.first_moments[c] += &st.first_moments[c];
            sums.second_moments[c] += &st.second_moments[c];
        }
        responsibilities.push(fresh.responsibilities);
    }
    let aggregates = Aggregates::from_sums(&sums);
    let sigmas = (0..k)
        .map(|c| {
            map_mean_and_scatter(
                aggregates.counts[c],
                &aggregates.means[c],
                &aggregates.scatter[c],
                &global.hyper,
            )
            .1
        })
        .collect();
    Ok(PatternState {
        aggregates,
        sigmas,
        responsibilities,
    })
}

/// Replaces one random sample by a point within distance `radius` and sums
/// the resulting per-pattern posterior KL divergences, with responsibilities
/// frozen: `w̃_k − w_k = r_k (x̃ − x) / λ_k`.
pub fn perturbation_audit<T: Real>(
    global: &GgmGlobal<T>,
    state: &PatternState<T>,
    radius: f64,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<AuditSummary, PrivacyError> {
    let mut rng = rng_from_seed(seed);
    let m = global.dim();
    let lambda0 = global.hyper.lambda0;
    let mut summary = AuditSummary {
        trials,
        passes: 0,
        violations: 0,
        max_kl: 0.0,
    };
    let sizes: Vec<usize> = state.responsibilities.iter().map(|r| r.nrows()).collect();
    if sizes.iter().all(|&n| n == 0) {
        return Err(PrivacyError::EmptyDataset);
    }
    for _ in 0..trials {
        let s = loop {
            let s = rng.random_range(0..sizes.len());
            if sizes[s] > 0 {
                break s;
            }
        };
        let n = rng.random_range(0..sizes[s]);
        let mut dir = DVector::<f64>::from_fn(m, |_, _| standard_normal::<f64, _>(&mut rng));
        let norm = dir.norm();
        if norm > 0.0 {
            dir /= norm;
        }
        let len = radius * rng.random::<f64>();
        let shift = DVector::<T>::from_iterator(m, dir.iter().map(|v| T::lit(v * len)));
        let mut kl = 0.0;
        for c in 0..global.k() {
            let lambda = lambda0 + state.aggregates.counts[c];
            let r = state.responsibilities[s][(n, c)];
            let dw = &shift * (r / lambda);
            kl += kl_same_cov(&dw, &DVector::zeros(m), lambda, &global.precisions[c])?.as_f64();
        }
        summary.max_kl = summary.max_kl.max(kl);
        if kl <= epsilon {
            summary.passes += 1;
        } else {
            summary.violations += 1;
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    /// Required entropy diversity `ℓ0`.
    pub ell0: f64,
    pub audit_trials: usize,
    /// Quantile of the distance to the median beyond which samples are
    /// treated as outliers when computing `R`.
    pub outlier_quantile: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            ell0: 2.0,
            audit_trials: 100,
            outlier_quantile: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentBound {
    pub component: usize,
    pub spectral_norm: f64,
    pub inputs: NormBoundInputs,
    pub bound: f64,
    pub residual: f64,
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantDiversity {
    pub participant: usize,
    pub entropy: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub budget: PrivacyBudget,
    pub components: Vec<ComponentBound>,
    pub diversity: Vec<ParticipantDiversity>,
    pub audit: AuditSummary,
    /// Set when some participant fails the diversity check; releasing
    /// posterior samples instead of point estimates is advised.
    pub recommend_posterior_sampling: bool,
}

/// Full privacy audit of a trained GGM on the participants' data.
pub fn privacy_report<T: Real>(
    datasets: &[DMatrix<T>],
    global: &GgmGlobal<T>,
    weights: &[DVector<T>],
    config: &PrivacyConfig,
    seed: u64,
) -> Result<PrivacyReport, PrivacyError> {
    if datasets.iter().any(|d| d.nrows() == 0) || datasets.is_empty() {
        return Err(PrivacyError::EmptyDataset);
    }
    if !(config.ell0 > 0.0) {
        return Err(PrivacyError::NonPositive("ell0"));
    }
    let state = pattern_state(datasets, global, weights)?;
    let hyper = &global.hyper;
    let max_local = datasets.iter().map(|d| d.nrows()).max().unwrap_or(1);
    let mut components = Vec::with_capacity(global.k());
    for c in 0..global.k() {
        let inputs = NormBoundInputs::new(
            &state.sigmas[c],
            state.aggregates.counts[c],
            hyper.rho,
            hyper.delta,
            datasets.len(),
            max_local,
        );
        let nb = lambda_norm_bound(inputs.f_at_identity, inputs.b, inputs.c, inputs.h)?;
        let norm = spectral_norm(&global.precisions[c]).as_f64();
        components.push(ComponentBound {
            component: c,
            spectral_norm: norm,
            inputs,
            bound: nb.bound,
            residual: nb.residual,
            within_bound: norm <= nb.bound,
        });
    }
    let bound = components.iter().map(|c| c.bound).fold(0.0, f64::max);
    let radius = pairwise_radius(datasets, config.outlier_quantile).max(f64::MIN_POSITIVE);
    let budget = epsilon_bound(
        global.k(),
        bound,
        radius,
        hyper.lambda0.as_f64(),
        hyper.delta.as_f64(),
    )?;
    let audit = perturbation_audit(global, &state, radius, budget.epsilon, config.audit_trials, seed)?;
    let threshold = config.ell0.ln();
    let diversity = datasets
        .iter()
        .enumerate()
        .map(|(s, d)| {
            let rep = entropy_diversity(d, &global.means, &global.precisions, threshold)?;
            Ok(ParticipantDiversity {
                participant: s,
                entropy: rep.max_entropy,
                threshold,
                pass: rep.pass,
            })
        })
        .collect::<Result<Vec<_>, PrivacyError>>()?;
    let recommend_posterior_sampling = diversity.iter().any(|d| !d.pass);
    Ok(PrivacyReport {
        budget,
        components,
        diversity,
        audit,
        recommend_posterior_sampling,
    })
}
