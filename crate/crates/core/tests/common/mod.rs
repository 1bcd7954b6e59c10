//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use collabdict::ggm::{graphical_lasso, GgmGlobal, GgmHyper, GgmLocal, GlassoOptions};
use collabdict::mtvae::Mlp;
use collabdict::rng::{rng_from_seed, standard_normal};
use collabdict::topology::Graph;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

/// Gaussian log density through an explicit inverse-free determinant and
/// quadratic form (no Cholesky).
pub fn log_gauss(x: &DVector<f64>, mu: &DVector<f64>, lam: &DMatrix<f64>) -> f64 {
    let m = x.len() as f64;
    let d = x - mu;
    let quad = (d.transpose() * lam * &d)[(0, 0)];
    -0.5 * m * (2.0 * std::f64::consts::PI).ln() + 0.5 * lam.determinant().ln() - 0.5 * quad
}

pub fn lse(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// One EM round on the pooled data of all participants.
pub struct OracleRound {
    pub means: Vec<DVector<f64>>,
    pub precisions: Vec<DMatrix<f64>>,
    pub weights: Vec<DVector<f64>>,
    pub kept: Vec<usize>,
    pub counts: Vec<f64>,
}

pub fn centralized_em_round(
    datasets: &[DMatrix<f64>],
    means: &[DVector<f64>],
    precisions: &[DMatrix<f64>],
    weights: &[DVector<f64>],
    hyper: &GgmHyper<f64>,
) -> OracleRound {
    let k = means.len();
    let m = hyper.m0.len();
    let mut n_k = vec![0.0; k];
    let mut first = vec![DVector::<f64>::zeros(m); k];
    let mut second = vec![DMatrix::<f64>::zeros(m, m); k];
    let mut new_weights = Vec::new();
    for (data, pi) in datasets.iter().zip(weights) {
        let mut local = vec![0.0; k];
        for n in 0..data.nrows() {
            let x: DVector<f64> = data.row(n).transpose();
            let logs: Vec<f64> = (0..k)
                .map(|c| pi[c].ln() + log_gauss(&x, &means[c], &precisions[c]))
                .collect();
            let z = lse(&logs);
            for c in 0..k {
                let r = (logs[c] - z).exp();
                local[c] += r;
                n_k[c] += r;
                first[c] += &x * r;
                second[c] += &x * x.transpose() * r;
            }
        }
        let tot: f64 = local.iter().sum();
        new_weights.push(DVector::from_iterator(k, local.iter().map(|v| v / tot)));
    }
    let kept: Vec<usize> = (0..k).filter(|&c| n_k[c] >= hyper.delta).collect();
    let mut out = OracleRound {
        means: vec![],
        precisions: vec![],
        weights: vec![],
        kept: kept.clone(),
        counts: kept.iter().map(|&c| n_k[c]).collect(),
    };
    for &c in &kept {
        let nb = n_k[c];
        let mbar = &first[c] / nb;
        let cbar = &second[c] / nb;
        let lam = hyper.lambda0 + nb;
        let mu = (&hyper.m0 * hyper.lambda0 + &mbar * nb) / lam;
        let dm = &mbar - &hyper.m0;
        let mut sigma = &cbar - &mbar * mbar.transpose() + &dm * dm.transpose() * (hyper.lambda0 / lam);
        sigma = (&sigma + sigma.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        let ridge = 1e-8 * (sigma.trace() / m as f64).max(1e-30);
        if min_eig < ridge {
            for i in 0..m {
                sigma[(i, i)] += ridge;
            }
        }
        let sol = graphical_lasso(&sigma, hyper.rho, nb, &GlassoOptions::default()).unwrap();
        out.means.push(mu);
        out.precisions.push(sol.precision);
    }
    for w in new_weights {
        let v = DVector::from_iterator(kept.len(), kept.iter().map(|&c| w[c]));
        let s = v.sum();
        out.weights.push(v / s);
    }
    out
}

/// Subgradient optimality residual of `b ln|Λ| − Tr(ΛΣ) − (ρ/N)||Λ||_1`,
/// computed with a general inverse.
pub fn kkt_violation(lam: &DMatrix<f64>, sigma: &DMatrix<f64>, rho: f64, n: f64) -> f64 {
    let b = (n + 1.0) / n;
    let inv = lam.clone().try_inverse().unwrap();
    let pen = rho / n;
    let mut worst: f64 = 0.0;
    for i in 0..lam.nrows() {
        for j in 0..lam.ncols() {
            let g = b * inv[(i, j)] - sigma[(i, j)];
            let v = if lam[(i, j)] == 0.0 {
                (g.abs() - pen).max(0.0)
            } else {
                (g - pen * lam[(i, j)].signum()).abs()
            };
            worst = worst.max(v);
        }
    }
    worst
}

pub fn random_spd(m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    let a = DMatrix::from_fn(m, m + 3, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / (m as f64 + 3.0) + DMatrix::identity(m, m) * 0.1
}

/// Closed-form `KL(N(m, diag h²) || N(0, I))`.
pub fn gaussian_kl_to_standard(m: &DVector<f64>, h: &DVector<f64>) -> f64 {
    0.5 * m
        .iter()
        .zip(h.iter())
        .map(|(mi, hi)| hi * hi + mi * mi - 1.0 - (hi * hi).ln())
        .sum::<f64>()
}

/// General Gaussian KL between `N(a, A⁻¹)` and `N(b, B⁻¹)` given precisions.
pub fn gaussian_kl_general(
    a: &DVector<f64>,
    pa: &DMatrix<f64>,
    b: &DVector<f64>,
    pb: &DMatrix<f64>,
) -> f64 {
    let k = a.len() as f64;
    let cov_a = pa.clone().try_inverse().unwrap();
    let d = b - a;
    0.5 * ((pb * &cov_a).trace() + (d.transpose() * pb * &d)[(0, 0)] - k
        + (pa.determinant() / pb.determinant()).ln())
}

/// Direct evaluation of the one-hidden-layer network.
pub fn mlp_forward(net: &Mlp<f64>, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let h = net.spec.hidden_dim;
    let o = net.spec.output_dim;
    let mut g = vec![0.0; h];
    for i in 0..h {
        let mut a = net.b1[i];
        for j in 0..x.len() {
            a += net.w1[(i, j)] * x[j];
        }
        g[i] = if a > 0.0 { a } else { 0.0 };
    }
    let mut mean = DVector::zeros(o);
    let mut scale = DVector::zeros(o);
    for i in 0..o {
        let mut a = net.b_mean[i];
        let mut b = net.b_scale[i];
        for j in 0..h {
            a += net.w_mean[(i, j)] * g[j];
            b += net.w_scale[(i, j)] * g[j];
        }
        mean[i] = a;
        scale[i] = (1.0 + b.exp()).ln();
    }
    (mean, scale)
}

/// AUC by counting all positive/negative pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Best assignment of estimated to planted means by exhaustive search;
/// returns the largest matched distance.
pub fn matched_max_distance(est: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    fn perms(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }
    assert!(est.len() >= truth.len());
    let mut best = f64::INFINITY;
    for p in perms(est.len()) {
        let worst = truth
            .iter()
            .enumerate()
            .map(|(t, mu)| (&est[p[t]] - mu).norm())
            .fold(0.0, f64::max);
        best = best.min(worst);
    }
    best
}

/// Connected graph on `s` nodes for any `s ≥ 1`.
pub fn graph_for(s: usize) -> Graph {
    match s {
        1 => Graph::empty(1),
        2 => Graph::from_edges(2, [(0, 1)]).unwrap(),
        _ => Graph::cycle(s).unwrap(),
    }
}

/// Samples from a K-cluster mixture in M dimensions, `n` per participant.
pub fn mixture_data(s: usize, m: usize, k: usize, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = rng_from_seed(seed);
    let centers: Vec<DVector<f64>> = (0..k)
        .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-4.0..4.0)))
        .collect();
    (0..s)
        .map(|_| {
            let mut d = DMatrix::<f64>::zeros(n, m);
            for i in 0..n {
                let c = rng.random_range(0..k);
                for j in 0..m {
                    d[(i, j)] = centers[c][j] + standard_normal::<f64, _>(&mut rng);
                }
            }
            d
        })
        .collect()
}

pub fn local_weights(fit_locals: &[GgmLocal<f64>]) -> Vec<DVector<f64>> {
    fit_locals.iter().map(|l| l.weights.clone()).collect()
}

pub fn max_param_diff(a: &GgmGlobal<f64>, means: &[DVector<f64>], precisions: &[DMatrix<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..a.k() {
        worst = worst.max((&a.means[k] - &means[k]).amax());
        worst = worst.max((&a.precisions[k] - &precisions[k]).amax());
    }
    worst
}

/// Random GGM instance with S ≤ 5, M ≤ 4, K ≤ 3 and N ≤ 100 per participant.
pub struct GgmInstance {
    pub datasets: Vec<DMatrix<f64>>,
    pub k: usize,
    pub hyper: GgmHyper<f64>,
}

pub fn ggm_instance(seed: u64) -> GgmInstance {
    let mut rng = rng_from_seed(seed);
    let s = rng.random_range(1..=5);
    let m = rng.random_range(1..=4);
    let k = rng.random_range(1..=3);
    let n = rng.random_range(40..=100);
    let datasets = mixture_data(s, m, k, n, rng.random());
    let mut hyper = GgmHyper::with_dim(m);
    hyper.rho = rng.random_range(0.0..0.5);
    hyper.delta = 1e-3;
    GgmInstance { datasets, k, hyper }
}

/// Largest per-round deviation between the decentralized rounds (every
/// participant's view) and centralized EM on the pooled data applied to the
/// same state, plus the objective after each round.
pub struct RoundComparison {
    pub max_diff: f64,
    pub objectives: Vec<f64>,
    pub rounds: usize,
}

pub fn compare_with_oracle(
    inst: &GgmInstance,
    aggregator: &collabdict::consensus::Aggregator,
    rounds: usize,
    seed: u64,
) -> RoundComparison {
    use collabdict::ggm::{collab_round, initialize, log_posterior, CollabState, GgmConfig};
    let s = inst.datasets.len();
    let m = inst.hyper.m0.len();
    let w = collabdict::topology::WeightMatrix::from_graph(&graph_for(s));
    let mut config = GgmConfig::<f64>::new(inst.k, m);
    config.hyper = inst.hyper.clone();
    let (global, locals) = initialize(&inst.datasets, inst.k, &inst.hyper, 1e-2, seed).unwrap();
    let mut state = CollabState {
        views: vec![global; s],
        locals,
    };
    let mut out = RoundComparison {
        max_diff: 0.0,
        objectives: Vec::new(),
        rounds,
    };
    for r in 0..rounds {
        let weights = local_weights(&state.locals);
        let oracle = centralized_em_round(
            &inst.datasets,
            &state.views[0].means,
            &state.views[0].precisions,
            &weights,
            &inst.hyper,
        );
        let (next, _) = collab_round(
            &inst.datasets,
            &w,
            &state,
            &config,
            aggregator,
            collabdict::rng::derive_seed(seed, &[r as u64]),
        )
        .unwrap();
        assert_eq!(next.views[0].k(), oracle.kept.len(), "pruning differs from oracle");
        for view in &next.views {
            out.max_diff = out.max_diff.max(max_param_diff(view, &oracle.means, &oracle.precisions));
        }
        for (local, wt) in next.locals.iter().zip(&oracle.weights) {
            out.max_diff = out.max_diff.max((&local.weights - wt).amax());
        }
        let weights = local_weights(&next.locals);
        out.objectives
            .push(log_posterior(&inst.datasets, &weights, &next.views[0]).unwrap());
        state = next;
    }
    out
}

pub fn non_decreasing(values: &[f64]) -> bool {
    values
        .windows(2)
        .all(|p| p[1] >= p[0] - 1e-9 * (1.0 + p[0].abs()))
}

pub fn tight_gossip() -> collabdict::consensus::Aggregator {
    use collabdict::consensus::{Aggregator, ChunkedOptions, StoppingRule};
    Aggregator::Gossip(ChunkedOptions {
        rule: StoppingRule {
            tol: 1e-13,
            max_iter: 1_000_000,
            relative: true,
        },
        chunks: 3,
        relabel: true,
    })
}

/// ELBO recomputed with explicit loops over samples and draws.
pub fn elbo_oracle(enc: &Mlp<f64>, dec: &Mlp<f64>, data: &DMatrix<f64>, j: usize, seed: u64) -> f64 {
    let d = enc.spec.output_dim;
    let draws = collabdict::mtvae::mc_draws::<f64>(data.nrows(), j, d, seed);
    let mut total = 0.0;
    for n in 0..data.nrows() {
        let x: DVector<f64> = data.row(n).transpose();
        let (m, h) = mlp_forward(enc, &x);
        total -= gaussian_kl_to_standard(&m, &h);
        for v in &draws[n] {
            let z = &m + h.component_mul(v);
            let (mu, sigma) = mlp_forward(dec, &z);
            let mut ll = 0.0;
            for i in 0..x.len() {
                let r = (x[i] - mu[i]) / sigma[i];
                ll += -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma[i].ln() - 0.5 * r * r;
            }
            total += ll / j as f64;
        }
    }
    total
}

/// Largest per-parameter relative error between the analytic ELBO gradient
/// and central finite differences of the oracle ELBO (same draws).
/// Denominator: `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(
    enc: &Mlp<f64>,
    dec: &Mlp<f64>,
    data: &DMatrix<f64>,
    j: usize,
    seed: u64,
    floor: f64,
) -> f64 {
    let g = collabdict::mtvae::elbo_grad(enc, dec, data, j, seed).unwrap();
    let mut worst: f64 = 0.0;
    for (which, net, grad) in [(0, enc, &g.encoder), (1, dec, &g.decoder)] {
        let base = net.to_flat();
        let analytic = grad.to_flat();
        for p in 0..base.len() {
            let step = 1e-5 * base[p].abs().max(1.0);
            let eval = |delta: f64| {
                let mut flat = base.clone();
                flat[p] += delta;
                let moved = Mlp::from_flat(net.spec, &flat).unwrap();
                if which == 0 {
                    elbo_oracle(&moved, dec, data, j, seed)
                } else {
                    elbo_oracle(enc, &moved, data, j, seed)
                }
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let denom = analytic[p].abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic[p] - numeric).abs() / denom);
        }
    }
    worst
}

/// Random gradient-check instance: small networks with every weight random
/// and data of moderate scale.
pub fn vae_instance(seed: u64) -> (Mlp<f64>, Mlp<f64>, DMatrix<f64>) {
    use collabdict::mtvae::MlpSpec;
    let mut rng = rng_from_seed(seed);
    let m = rng.random_range(1..=3);
    let d = rng.random_range(1..=2);
    let h = rng.random_range(2..=5);
    let n = rng.random_range(1..=4);
    let enc = Mlp::random_full(MlpSpec::new(m, h, d).unwrap(), rng.random(), 0.5);
    let dec = Mlp::random_full(MlpSpec::new(d, h, m).unwrap(), rng.random(), 0.5);
    let data = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.5..1.5));
    (enc, dec, data)
}

/// Single-machine alternating SGD on one dataset: encoder step, then decoder
/// step with the updated encoder, both on the same draws.
pub fn single_machine_sgd(
    enc: &Mlp<f64>,
    dec: &Mlp<f64>,
    data: &DMatrix<f64>,
    eta: f64,
    j: usize,
    steps: usize,
    seed: u64,
) -> (Mlp<f64>, Mlp<f64>) {
    use collabdict::mtvae::elbo_grad;
    let mut enc = enc.clone();
    let mut dec = dec.clone();
    for t in 0..steps {
        let s = collabdict::mtvae::local_seed(seed, t, 0);
        let g = elbo_grad(&enc, &dec, data, j, s).unwrap();
        let mut flat = enc.to_flat();
        for (p, gp) in flat.iter_mut().zip(g.encoder.to_flat()) {
            *p += eta * gp;
        }
        enc = Mlp::from_flat(enc.spec, &flat).unwrap();
        let g = elbo_grad(&enc, &dec, data, j, s).unwrap();
        let mut flat = dec.to_flat();
        for (p, gp) in flat.iter_mut().zip(g.decoder.to_flat()) {
            *p += eta * gp;
        }
        dec = Mlp::from_flat(dec.spec, &flat).unwrap();
    }
    (enc, dec)
}

/// Independent single-sample perturbation audit: recomputes the posterior
/// means of every pattern from the pooled data with sample `n` of
/// participant `s` replaced by a point within `radius` (responsibilities
/// frozen) and sums the exact Gaussian KL divergences. Returns the largest
/// total over `trials` random perturbations.
pub fn audit_oracle(
    datasets: &[DMatrix<f64>],
    global: &GgmGlobal<f64>,
    weights: &[DVector<f64>],
    radius: f64,
    trials: usize,
    seed: u64,
) -> f64 {
    let k = global.k();
    let m = global.dim();
    let hyper = &global.hyper;
    let mut resp: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut counts = vec![0.0; k];
    let mut sums = vec![DVector::<f64>::zeros(m); k];
    for (data, pi) in datasets.iter().zip(weights) {
        let mut rows = Vec::new();
        for n in 0..data.nrows() {
            let x: DVector<f64> = data.row(n).transpose();
            let logs: Vec<f64> = (0..k)
                .map(|c| pi[c].ln() + log_gauss(&x, &global.means[c], &global.precisions[c]))
                .collect();
            let z = lse(&logs);
            let r: Vec<f64> = logs.iter().map(|l| (l - z).exp()).collect();
            for c in 0..k {
                counts[c] += r[c];
                sums[c] += &x * r[c];
            }
            rows.push(r);
        }
        resp.push(rows);
    }
    let post_mean = |c: usize, sum: &DVector<f64>| (&hyper.m0 * hyper.lambda0 + sum) / (hyper.lambda0 + counts[c]);
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let s = rng.random_range(0..datasets.len());
        let n = rng.random_range(0..datasets[s].nrows());
        let x: DVector<f64> = datasets[s].row(n).transpose();
        let dir = DVector::from_fn(m, |_, _| standard_normal::<f64, _>(&mut rng));
        let x_new = &x + dir.normalize() * (radius * rng.random::<f64>());
        let mut kl = 0.0;
        for c in 0..k {
            let lam = hyper.lambda0 + counts[c];
            let prec = &global.precisions[c] * lam;
            let a = post_mean(c, &sums[c]);
            let b = post_mean(c, &(&sums[c] + (&x_new - &x) * resp[s][n][c]));
            kl += gaussian_kl_general(&a, &prec, &b, &prec);
        }
        worst = worst.max(kl);
    }
    worst
}

/// GGM trained on planted data with as many patterns as clusters.
pub fn trained_ggm(
    participants: usize,
    dim: usize,
    clusters: usize,
    seed: u64,
) -> (Vec<DMatrix<f64>>, collabdict::ggm::GgmFit<f64>) {
    use collabdict::ggm::{fit, GgmConfig};
    use collabdict::harness::PlantedConfig;
    let planted = PlantedConfig {
        participants,
        dim,
        clusters,
        samples_per_participant: 150,
        ..PlantedConfig::default()
    };
    let data = planted.to_spec(seed).unwrap().generate().unwrap();
    let w = collabdict::topology::WeightMatrix::from_graph(&graph_for(participants));
    let config = GgmConfig::<f64>::new(clusters, dim);
    let fitted = fit(&data.datasets, &w, &config, &tight_gossip(), seed).unwrap();
    (data.datasets, fitted)
}
