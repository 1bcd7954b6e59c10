use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rayon::prelude::*;

use super::glasso::{graphical_lasso, GlassoOptions};
use super::{Aggregates, GaussianComponent, GgmError, GgmGlobal, GgmHyper, GgmLocal, SuffStats};
use crate::consensus::Aggregator;
use crate::rng::{derive_seed, rng_from_seed, standard_normal};
use crate::scalar::{log_sum_exp, Real};
use crate::topology::WeightMatrix;

/// Pattern posterior of one sample, `r_k ∝ π_k N(x | μ_k, Λ_k^{-1})`,
/// normalized in log space.
pub fn responsibilities<T: Real>(
    x: &DVector<T>,
    weights: &DVector<T>,
    components: &[GaussianComponent<T>],
) -> DVector<T> {
    let logs: Vec<T> = components
        .iter()
        .zip(weights.iter())
        .map(|(c, &pi)| pi.ln() + c.log_density(x))
        .collect();
    let norm = log_sum_exp(&logs);
    DVector::from_iterator(logs.len(), logs.iter().map(|&l| (l - norm).exp()))
}

/// E-step for one participant: responsibilities under the current weights,
/// then refreshed `π^s` and the local sufficient statistics.
pub fn local_update<T: Real>(
    data: &DMatrix<T>,
    local: &GgmLocal<T>,
    global: &GgmGlobal<T>,
) -> Result<(GgmLocal<T>, SuffStats<T>), GgmError> {
    let (n, m) = data.shape();
    if n == 0 {
        return Err(GgmError::EmptyDataset);
    }
    if m != global.dim() {
        return Err(GgmError::DimensionMismatch(format!(
            "data has {m} columns, model dimension is {}",
            global.dim()
        )));
    }
    let k = global.k();
    if local.weights.len() != k {
        return Err(GgmError::DimensionMismatch(format!(
            "{} mixture weights for {k} components",
            local.weights.len()
        )));
    }
    let comps = global.components()?;
    let mut resp = DMatrix::<T>::zeros(n, k);
    let mut stats = SuffStats {
        counts: vec![T::zero(); k],
        first_moments: vec![DVector::zeros(m); k],
        second_moments: vec![DMatrix::zeros(m, m); k],
    };
    for i in 0..n {
        let x: DVector<T> = data.row(i).transpose();
        let r = responsibilities(&x, &local.weights, &comps);
        let outer = &x * x.transpose();
        for c in 0..k {
            resp[(i, c)] = r[c];
            stats.counts[c] += r[c];
            stats.first_moments[c].axpy(r[c], &x, T::one());
            stats.second_moments[c].zip_apply(&outer, |a, b| *a += r[c] * b);
        }
    }
    let total = stats.counts.iter().fold(T::zero(), |a, &b| a + b);
    let weights = DVector::from_iterator(k, stats.counts.iter().map(|&c| c / total));
    Ok((
        GgmLocal {
            weights,
            responsibilities: resp,
        },
        stats,
    ))
}

/// Every participant's copy of the network aggregates after one round of
/// consensus.
#[derive(Clone, Debug)]
pub struct AggregateRound<T: Real> {
    pub views: Vec<Aggregates<T>>,
    pub iterations: usize,
}

/// Sums local statistics across the network. All entries (counts, first
/// moments, second-moment upper triangles) travel in one batched session.
pub fn aggregate<T: Real>(
    stats: &[SuffStats<T>],
    w: &WeightMatrix<T>,
    aggregator: &Aggregator,
    seed: u64,
) -> Result<AggregateRound<T>, GgmError> {
    let first = stats
        .first()
        .ok_or_else(|| GgmError::DimensionMismatch("no participants".into()))?;
    let (k, m) = (first.k(), first.dim());
    if stats.iter().any(|s| s.k() != k || s.dim() != m) {
        return Err(GgmError::DimensionMismatch(
            "participants disagree on K or M".into(),
        ));
    }
    let e = SuffStats::<T>::flat_len(k, m);
    let mut local = DMatrix::<T>::zeros(stats.len(), e);
    for (s, st) in stats.iter().enumerate() {
        for (j, v) in st.flatten().into_iter().enumerate() {
            local[(s, j)] = v;
        }
    }
    let sums = aggregator.network_sum(&local, w, seed)?;
    let views = (0..stats.len())
        .map(|s| {
            let row: Vec<T> = sums.per_participant.row(s).iter().copied().collect();
            Aggregates::from_sums(&SuffStats::unflatten(&row, k, m))
        })
        .collect();
    Ok(AggregateRound {
        views,
        iterations: sums.iterations,
    })
}

/// Indices of components with `N̄_k ≥ δ`.
pub fn prune<T: Real>(agg: &Aggregates<T>, delta: T) -> Result<Vec<usize>, GgmError> {
    if !(delta > T::zero()) {
        return Err(GgmError::InvalidConfig("delta must be positive".into()));
    }
    let keep: Vec<usize> = (0..agg.k()).filter(|&k| agg.counts[k] >= delta).collect();
    if keep.is_empty() {
        let max_count = agg
            .counts
            .iter()
            .fold(f64::NEG_INFINITY, |a, c| a.max(c.as_f64()));
        return Err(GgmError::ModelCollapse {
            max_count,
            delta: delta.as_f64(),
        });
    }
    Ok(keep)
}

/// MAP mean and the scatter matrix fed to the graphical lasso:
/// `μ = (λ0 m0 + N̄ m̄)/(λ0 + N̄)` and
/// `Σ = C̄ − m̄m̄ᵀ + λ0/(λ0 + N̄) (m̄ − m0)(m̄ − m0)ᵀ`.
pub fn map_mean_and_scatter<T: Real>(
    count: T,
    mean: &DVector<T>,
    scatter: &DMatrix<T>,
    hyper: &GgmHyper<T>,
) -> (DVector<T>, DMatrix<T>) {
    let lam = hyper.lambda0 + count;
    let mu = (&hyper.m0 * hyper.lambda0 + mean * count) / lam;
    let dm = mean - &hyper.m0;
    let sigma = scatter - mean * mean.transpose() + (&dm * dm.transpose()) * (hyper.lambda0 / lam);
    let sigma = (&sigma + sigma.transpose()) * T::lit(0.5);
    (mu, sigma)
}

/// M-step on (pruned) aggregates.
pub fn optimize_global<T: Real>(
    agg: &Aggregates<T>,
    hyper: &GgmHyper<T>,
    glasso: &GlassoOptions,
) -> Result<GgmGlobal<T>, GgmError> {
    hyper.validate()?;
    let m = hyper.m0.len();
    let mut means = Vec::with_capacity(agg.k());
    let mut precisions = Vec::with_capacity(agg.k());
    for k in 0..agg.k() {
        let count = agg.counts[k];
        if !(count > T::zero()) {
            return Err(GgmError::NumericalConditioning {
                component: Some(k),
                detail: format!("non-positive count {count}; prune before optimizing"),
            });
        }
        let (mu, mut sigma) = map_mean_and_scatter(count, &agg.means[k], &agg.scatter[k], hyper);
        let eig = SymmetricEigen::new(sigma.clone()).eigenvalues;
        let min_eig = eig.iter().copied().fold(T::lit(f64::INFINITY), |a, b| a.min(b));
        let max_diag = sigma.diagonal().amax();
        if min_eig < -T::lit(1e-8) * max_diag.max(T::one()) || !min_eig.is_finite_real() {
            return Err(GgmError::NumericalConditioning {
                component: Some(k),
                detail: format!("scatter matrix has eigenvalue {min_eig}"),
            });
        }
        let ridge = T::lit(1e-8) * (sigma.trace() / T::from_usize_lossy(m)).max(T::lit(1e-30));
        if min_eig < ridge {
            for i in 0..m {
                sigma[(i, i)] += ridge;
            }
        }
        let sol = graphical_lasso(&sigma, hyper.rho, count, glasso).map_err(|e| match e {
            GgmError::NumericalConditioning { detail, .. } => GgmError::NumericalConditioning {
                component: Some(k),
                detail,
            },
            other => other,
        })?;
        means.push(mu);
        precisions.push(sol.precision);
    }
    Ok(GgmGlobal {
        means,
        precisions,
        hyper: hyper.clone(),
    })
}

/// `Σ_s Σ_n ln Σ_k π^s_k N(x | μ_k, Λ_k^{-1})` plus the log prior
/// `Σ_k [ln N(μ_k | m0, (λ0 Λ_k)^{-1}) − (ρ/2)||Λ_k||_1]`. EM rounds never
/// decrease it.
pub fn log_posterior<T: Real>(
    datasets: &[DMatrix<T>],
    weights: &[DVector<T>],
    global: &GgmGlobal<T>,
) -> Result<T, GgmError> {
    let comps = global.components()?;
    let mut total = T::zero();
    for (data, pi) in datasets.iter().zip(weights) {
        for i in 0..data.nrows() {
            let x: DVector<T> = data.row(i).transpose();
            let logs: Vec<T> = comps
                .iter()
                .zip(pi.iter())
                .map(|(c, &p)| p.ln() + c.log_density(&x))
                .collect();
            total += log_sum_exp(&logs);
        }
    }
    let hyper = &global.hyper;
    let half = T::lit(0.5);
    for c in &comps {
        let prior = GaussianComponent::new(hyper.m0.clone(), &c.precision * hyper.lambda0)
            .expect("scaled positive definite matrix");
        let l1 = c.precision.iter().fold(T::zero(), |a, v| a + v.abs());
        total += prior.log_density(&c.mean) - half * hyper.rho * l1;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GgmConfig<T: Real> {
    pub k: usize,
    pub hyper: GgmHyper<T>,
    pub max_rounds: usize,
    /// Convergence threshold on the relative change of every `μ_k`, `Λ_k`.
    pub tol: f64,
    pub glasso: GlassoOptions,
    /// Initial means are data points plus Gaussian noise with this many
    /// per-feature standard deviations.
    pub init_noise: f64,
}

impl<T: Real> GgmConfig<T> {
    pub fn new(k: usize, dim: usize) -> Self {
        Self {
            k,
            hyper: GgmHyper::with_dim(dim),
            max_rounds: 200,
            tol: 1e-5,
            glasso: GlassoOptions::default(),
            init_noise: 1e-2,
        }
    }
}

/// Diagnostics of one CollabDict round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub k: usize,
    pub objective: f64,
    pub max_relative_change: f64,
    pub consensus_iterations: usize,
    /// Largest difference between any participant's parameters and
    /// participant 0's.
    pub view_spread: f64,
}

#[derive(Clone, Debug)]
pub struct GgmFit<T: Real> {
    /// Every participant's copy of the dictionary.
    pub views: Vec<GgmGlobal<T>>,
    pub locals: Vec<GgmLocal<T>>,
    pub history: Vec<RoundRecord>,
    pub converged: bool,
}

impl<T: Real> GgmFit<T> {
    /// Participant 0's dictionary (all copies agree within consensus tolerance).
    pub fn global(&self) -> &GgmGlobal<T> {
        &self.views[0]
    }

    pub fn weights(&self) -> Vec<DVector<T>> {
        self.locals.iter().map(|l| l.weights.clone()).collect()
    }
}

fn check_datasets<T: Real>(datasets: &[DMatrix<T>], dim: usize) -> Result<(), GgmError> {
    if datasets.is_empty() {
        return Err(GgmError::DimensionMismatch("no participants".into()));
    }
    for d in datasets {
        if d.nrows() == 0 {
            return Err(GgmError::EmptyDataset);
        }
        if d.ncols() != dim {
            return Err(GgmError::DimensionMismatch(format!(
                "dataset has {} columns, expected {dim}",
                d.ncols()
            )));
        }
    }
    Ok(())
}

/// Initial dictionary: pattern `k` is seeded by a random data point of
/// participant `k mod S` plus small noise; `Λ_k = I`, `π^s` uniform.
pub fn initialize<T: Real>(
    datasets: &[DMatrix<T>],
    k: usize,
    hyper: &GgmHyper<T>,
    noise: f64,
    seed: u64,
) -> Result<(GgmGlobal<T>, Vec<GgmLocal<T>>), GgmError> {
    let m = hyper.m0.len();
    check_datasets(datasets, m)?;
    if k == 0 {
        return Err(GgmError::InvalidConfig("K must be at least 1".into()));
    }
    let s_count = datasets.len();
    let mut means = vec![DVector::zeros(m); k];
    for s in 0..s_count {
        let owned: Vec<usize> = (s..k).step_by(s_count).collect();
        if owned.is_empty() {
            continue;
        }
        let data = &datasets[s];
        let n = data.nrows();
        let mut rng = rng_from_seed(derive_seed(seed, &[s as u64]));
        let picks: Vec<usize> = if owned.len() <= n {
            sample(&mut rng, n, owned.len()).into_vec()
        } else {
            (0..owned.len()).map(|i| i % n).collect()
        };
        let std = feature_std(data);
        for (&comp, &row) in owned.iter().zip(&picks) {
            let mut mu: DVector<T> = data.row(row).transpose();
            for j in 0..m {
                let z: T = standard_normal(&mut rng);
                mu[j] += z * T::lit(noise) * std[j];
            }
            means[comp] = mu;
        }
    }
    let global = GgmGlobal {
        means,
        precisions: vec![DMatrix::identity(m, m); k],
        hyper: hyper.clone(),
    };
    let locals = datasets
        .iter()
        .map(|d| GgmLocal::uniform(k, d.nrows()))
        .collect();
    Ok((global, locals))
}

fn feature_std<T: Real>(data: &DMatrix<T>) -> Vec<T> {
    let n = T::from_usize_lossy(data.nrows());
    (0..data.ncols())
        .map(|j| {
            let col = data.column(j);
            let mean = col.sum() / n;
            let var = col.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let sd = var.sqrt();
            if sd > T::zero() {
                sd
            } else {
                T::one()
            }
        })
        .collect()
}

/// State carried between rounds: each participant's copy of the dictionary
/// and its private parameters.
#[derive(Clone, Debug)]
pub struct CollabState<T: Real> {
    pub views: Vec<GgmGlobal<T>>,
    pub locals: Vec<GgmLocal<T>>,
}

/// One full round: local updates, aggregation, pruning, optimization.
/// Returns the new state and the consensus iteration count.
pub fn collab_round<T: Real>(
    datasets: &[DMatrix<T>],
    w: &WeightMatrix<T>,
    state: &CollabState<T>,
    config: &GgmConfig<T>,
    aggregator: &Aggregator,
    seed: u64,
) -> Result<(CollabState<T>, usize), GgmError> {
    let updates: Vec<(GgmLocal<T>, SuffStats<T>)> = datasets
        .par_iter()
        .zip(state.locals.par_iter())
        .zip(state.views.par_iter())
        .map(|((data, local), view)| local_update(data, local, view))
        .collect::<Result<_, _>>()?;
    let stats: Vec<SuffStats<T>> = updates.iter().map(|(_, s)| s.clone()).collect();
    let round = aggregate(&stats, w, aggregator, seed)?;

    let keeps: Vec<Vec<usize>> = round
        .views
        .iter()
        .map(|agg| prune(agg, config.hyper.delta))
        .collect::<Result<_, _>>()?;
    if keeps.iter().any(|k| k != &keeps[0]) {
        return Err(GgmError::InconsistentViews(
            "participants pruned different components".into(),
        ));
    }
    let keep = &keeps[0];
    let views: Vec<GgmGlobal<T>> = round
        .views
        .par_iter()
        .map(|agg| optimize_global(&agg.retain(keep), &config.hyper, &config.glasso))
        .collect::<Result<_, _>>()?;
    let locals = updates.iter().map(|(l, _)| l.retain(keep)).collect();
    Ok((CollabState { views, locals }, round.iterations))
}

fn relative_change<T: Real>(old: &GgmGlobal<T>, new: &GgmGlobal<T>) -> f64 {
    if old.k() != new.k() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for k in 0..old.k() {
        let dm = (&new.means[k] - &old.means[k]).norm() / old.means[k].norm().max(T::one());
        let dl = (&new.precisions[k] - &old.precisions[k]).norm()
            / old.precisions[k].norm().max(T::one());
        worst = worst.max(dm.as_f64()).max(dl.as_f64());
    }
    worst
}

fn view_spread<T: Real>(views: &[GgmGlobal<T>]) -> f64 {
    let base = &views[0];
    let mut worst = 0.0f64;
    for v in &views[1..] {
        for k in 0..base.k() {
            worst = worst
                .max((&v.means[k] - &base.means[k]).amax().as_f64())
                .max((&v.precisions[k] - &base.precisions[k]).amax().as_f64());
        }
    }
    worst
}

/// Runs CollabDict from a random initialization.
pub fn fit<T: Real>(
    datasets: &[DMatrix<T>],
    w: &WeightMatrix<T>,
    config: &GgmConfig<T>,
    aggregator: &Aggregator,
    seed: u64,
) -> Result<GgmFit<T>, GgmError> {
    let (global, locals) = initialize(
        datasets,
        config.k,
        &config.hyper,
        config.init_noise,
        derive_seed(seed, &[0]),
    )?;
    fit_from(datasets, w, config, aggregator, global, locals, seed)
}

/// Runs CollabDict from a given initialization until every `μ_k`, `Λ_k`
/// changes by less than `config.tol` (relative) or `max_rounds` is hit.
pub fn fit_from<T: Real>(
    datasets: &[DMatrix<T>],
    w: &WeightMatrix<T>,
    config: &GgmConfig<T>,
    aggregator: &Aggregator,
    global: GgmGlobal<T>,
    locals: Vec<GgmLocal<T>>,
    seed: u64,
) -> Result<GgmFit<T>, GgmError> {
    config.hyper.validate()?;
    check_datasets(datasets, config.hyper.m0.len())?;
    if w.size() != datasets.len() || locals.len() != datasets.len() {
        return Err(GgmError::DimensionMismatch(format!(
            "{} datasets, {} local states, graph of size {}",
            datasets.len(),
            locals.len(),
            w.size()
        )));
    }
    let mut state = CollabState {
        views: vec![global; datasets.len()],
        locals,
    };
    let mut history = Vec::new();
    let mut converged = false;
    for round in 0..config.max_rounds {
        let (next, iterations) = collab_round(
            datasets,
            w,
            &state,
            config,
            aggregator,
            derive_seed(seed, &[1, round as u64]),
        )?;
        let change = relative_change(&state.views[0], &next.views[0]);
        let weights: Vec<DVector<T>> = next.locals.iter().map(|l| l.weights.clone()).collect();
        let objective = log_posterior(datasets, &weights, &next.views[0])?.as_f64();
        history.push(RoundRecord {
            round,
            k: next.views[0].k(),
            objective,
            max_relative_change: change,
            consensus_iterations: iterations,
            view_spread: view_spread(&next.views),
        });
        state = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(GgmFit {
        views: state.views,
        locals: state.locals,
        history,
        converged,
    })
}
