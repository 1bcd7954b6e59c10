use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::elbo::{check_shapes, elbo_grad, ElboEstimate};
use super::mlp::{Mlp, MlpSpec};
use super::VaeError;
use crate::consensus::Aggregator;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Real;
use crate::topology::WeightMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    /// Monte-Carlo draws `J` per sample.
    pub mc_samples: usize,
    pub epochs: usize,
    /// Rows per local step; `None` uses the full local dataset. With
    /// mini-batches an epoch is one shuffled pass of synchronized steps.
    pub batch_size: Option<usize>,
    /// Optional cap on the Euclidean norm of each participant's encoder and
    /// decoder gradients, applied before the local update and before
    /// aggregation. `None` is plain SGD.
    pub grad_clip: Option<f64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_dim: 16,
            learning_rate: 1e-3,
            mc_samples: 8,
            epochs: 100,
            batch_size: None,
            grad_clip: None,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if self.mc_samples == 0 {
            return Err(VaeError::InvalidSamples);
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(VaeError::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(VaeError::InvalidConfig("batch size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(VaeError::InvalidConfig(format!("gradient clip {c} must be positive")));
            }
        }
        MlpSpec::new(1, self.hidden_dim, self.latent_dim)?;
        Ok(())
    }

    pub fn encoder_spec(&self, m: usize) -> Result<MlpSpec, VaeError> {
        MlpSpec::new(m, self.hidden_dim, self.latent_dim)
    }

    pub fn decoder_spec(&self, m: usize) -> Result<MlpSpec, VaeError> {
        MlpSpec::new(self.latent_dim, self.hidden_dim, m)
    }
}

/// Seed of participant `s`'s Monte-Carlo draws at synchronized step `t`
/// (`t` equals the epoch without mini-batching).
pub fn local_seed(seed: u64, t: usize, participant: usize) -> u64 {
    derive_seed(seed, &[2, t as u64, participant as u64])
}

fn consensus_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, &[3, t as u64])
}

fn batch_seed(seed: u64, epoch: usize, participant: usize) -> u64 {
    derive_seed(seed, &[4, epoch as u64, participant as u64])
}

/// Result of one local step.
#[derive(Clone, Debug)]
pub struct LocalStep<T: Real> {
    pub encoder: Mlp<T>,
    /// `∂L^s/∂θ` evaluated at the updated encoder.
    pub theta_grad: Mlp<T>,
    /// Bound before the encoder update.
    pub estimate: ElboEstimate<T>,
}

/// Gradient-ascent step on the private encoder, then the decoder gradient
/// at the new encoder (same draws). `theta` is not modified.
pub fn local_sgd<T: Real>(
    encoder: &Mlp<T>,
    theta: &Mlp<T>,
    data: &DMatrix<T>,
    eta: T,
    samples: usize,
    seed: u64,
) -> Result<LocalStep<T>, VaeError> {
    local_sgd_clipped(encoder, theta, data, eta, samples, seed, None)
}

/// [`local_sgd`] with both gradients clipped to norm `clip`.
pub fn local_sgd_clipped<T: Real>(
    encoder: &Mlp<T>,
    theta: &Mlp<T>,
    data: &DMatrix<T>,
    eta: T,
    samples: usize,
    seed: u64,
    clip: Option<T>,
) -> Result<LocalStep<T>, VaeError> {
    if !(eta >= T::zero()) {
        return Err(VaeError::InvalidConfig(format!("learning rate {eta}")));
    }
    let mut g = elbo_grad(encoder, theta, data, samples, seed)?;
    if let Some(c) = clip {
        g.encoder.clip_norm(c);
    }
    let mut updated = encoder.clone();
    updated.axpy(eta, &g.encoder);
    if !updated.is_finite() {
        return Err(VaeError::NonFinite("encoder after update".into()));
    }
    let mut theta_grad = elbo_grad(&updated, theta, data, samples, seed)?.decoder;
    if let Some(c) = clip {
        theta_grad.clip_norm(c);
    }
    Ok(LocalStep {
        encoder: updated,
        theta_grad,
        estimate: g.estimate,
    })
}

/// Every participant adds `η Σ_s ∂θ^s`, obtained through the aggregator, to
/// its own copy of `θ`. Returns the new copies and the consensus iterations.
pub fn global_step<T: Real>(
    thetas: &[Mlp<T>],
    grads: &[Mlp<T>],
    w: &WeightMatrix<T>,
    aggregator: &Aggregator,
    eta: T,
    seed: u64,
) -> Result<(Vec<Mlp<T>>, usize), VaeError> {
    if thetas.len() != grads.len() || thetas.is_empty() {
        return Err(VaeError::DimensionMismatch(format!(
            "{} decoder copies, {} gradients",
            thetas.len(),
            grads.len()
        )));
    }
    let spec = thetas[0].spec;
    if thetas.iter().chain(grads).any(|t| t.spec != spec) {
        return Err(VaeError::DimensionMismatch("decoder shapes differ".into()));
    }
    let p = spec.num_params();
    let mut local = DMatrix::<T>::zeros(grads.len(), p);
    for (s, g) in grads.iter().enumerate() {
        for (j, v) in g.to_flat().into_iter().enumerate() {
            local[(s, j)] = v;
        }
    }
    let sums = aggregator.network_sum(&local, w, seed)?;
    let updated = thetas
        .iter()
        .enumerate()
        .map(|(s, theta)| {
            let row: Vec<T> = sums.per_participant.row(s).iter().copied().collect();
            let total = Mlp::from_flat(spec, &row)?;
            let mut next = theta.clone();
            next.axpy(eta, &total);
            if next.is_finite() {
                Ok(next)
            } else {
                Err(VaeError::NonFinite(format!("decoder copy of participant {s}")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((updated, sums.iterations))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub participant: usize,
    pub objective: f64,
    pub kl_term: f64,
}

#[derive(Clone, Debug)]
pub struct VaeFit<T: Real> {
    /// Decoder copy held by every participant.
    pub thetas: Vec<Mlp<T>>,
    pub encoders: Vec<Mlp<T>>,
    pub log: Vec<EpochRecord>,
    /// `Σ_s L^s` per epoch: the bound before each step, summed over the
    /// epoch's batches.
    pub objective_history: Vec<f64>,
    /// Epochs whose mean KL divergence per sample fell below `1e-3`.
    pub collapse_epochs: Vec<usize>,
    pub consensus_iterations: usize,
}

impl<T: Real> VaeFit<T> {
    pub fn theta(&self) -> &Mlp<T> {
        &self.thetas[0]
    }

    pub fn theta_spread(&self) -> f64 {
        self.thetas[1..]
            .iter()
            .map(|t| t.max_abs_diff(&self.thetas[0]))
            .fold(0.0, f64::max)
    }
}

/// Shared decoder and one encoder per participant, randomly initialized.
pub fn init_params<T: Real>(
    config: &VaeConfig,
    m: usize,
    participants: usize,
    seed: u64,
) -> Result<(Mlp<T>, Vec<Mlp<T>>), VaeError> {
    let dec = Mlp::random(config.decoder_spec(m)?, derive_seed(seed, &[0]));
    let espec = config.encoder_spec(m)?;
    let encs = (0..participants)
        .map(|s| Mlp::random(espec, derive_seed(seed, &[1, s as u64])))
        .collect();
    Ok((dec, encs))
}

const COLLAPSE_KL: f64 = 1e-3;

pub fn fit<T: Real>(
    datasets: &[DMatrix<T>],
    w: &WeightMatrix<T>,
    config: &VaeConfig,
    aggregator: &Aggregator,
    seed: u64,
) -> Result<VaeFit<T>, VaeError> {
    let m = datasets
        .first()
        .ok_or_else(|| VaeError::DimensionMismatch("no participants".into()))?
        .ncols();
    let (theta, encoders) = init_params(config, m, datasets.len(), derive_seed(seed, &[0]))?;
    fit_from(datasets, w, config, aggregator, theta, encoders, seed)
}

/// Row order of participant `s` for one epoch (identity without
/// mini-batching).
fn epoch_order(n: usize, batch: Option<usize>, seed: u64) -> Vec<usize> {
    match batch {
        Some(b) if b < n => {
            let mut rng = rng_from_seed(seed);
            sample(&mut rng, n, n).into_vec()
        }
        _ => (0..n).collect(),
    }
}

/// Rows used by step `step` of an epoch: consecutive slices of the epoch
/// order, wrapping around for participants with fewer samples.
fn batch_rows(order: &[usize], batch: Option<usize>, step: usize) -> Vec<usize> {
    match batch {
        Some(b) if b < order.len() => {
            let mut rows: Vec<usize> = (0..b).map(|i| order[(step * b + i) % order.len()]).collect();
            rows.sort_unstable();
            rows
        }
        _ => order.to_vec(),
    }
}

/// Synchronized steps per epoch: enough for the largest participant to see
/// all of its samples once.
pub fn steps_per_epoch(sizes: &[usize], batch: Option<usize>) -> usize {
    let largest = sizes.iter().copied().max().unwrap_or(1);
    match batch {
        Some(b) if b < largest => largest.div_ceil(b),
        _ => 1,
    }
}

/// Alternates parallel local steps and a consensus-based decoder update for
/// `config.epochs` epochs.
pub fn fit_from<T: Real>(
    datasets: &[DMatrix<T>],
    w: &WeightMatrix<T>,
    config: &VaeConfig,
    aggregator: &Aggregator,
    theta: Mlp<T>,
    encoders: Vec<Mlp<T>>,
    seed: u64,
) -> Result<VaeFit<T>, VaeError> {
    config.validate()?;
    let s_count = datasets.len();
    if encoders.len() != s_count || w.size() != s_count {
        return Err(VaeError::DimensionMismatch(format!(
            "{s_count} datasets, {} encoders, graph of size {}",
            encoders.len(),
            w.size()
        )));
    }
    for (d, e) in datasets.iter().zip(&encoders) {
        if d.nrows() == 0 {
            return Err(VaeError::InvalidConfig("empty participant dataset".into()));
        }
        check_shapes(e, &theta, d.ncols())?;
    }
    let eta = T::lit(config.learning_rate);
    let clip = config.grad_clip.map(T::lit);
    let mut thetas = vec![theta; s_count];
    let mut encoders = encoders;
    let mut fit = VaeFit {
        thetas: Vec::new(),
        encoders: Vec::new(),
        log: Vec::new(),
        objective_history: Vec::new(),
        collapse_epochs: Vec::new(),
        consensus_iterations: 0,
    };
    let sizes: Vec<usize> = datasets.iter().map(|d| d.nrows()).collect();
    let steps = steps_per_epoch(&sizes, config.batch_size);
    for epoch in 0..config.epochs {
        let orders: Vec<Vec<usize>> = (0..s_count)
            .map(|s| epoch_order(sizes[s], config.batch_size, batch_seed(seed, epoch, s)))
            .collect();
        let mut totals = vec![(0.0, 0.0); s_count];
        for step in 0..steps {
            let t = epoch * steps + step;
            let results: Vec<LocalStep<T>> = (0..s_count)
                .into_par_iter()
                .map(|s| {
                    let rows = batch_rows(&orders[s], config.batch_size, step);
                    let data = if rows.len() == sizes[s] {
                        datasets[s].clone()
                    } else {
                        datasets[s].select_rows(&rows)
                    };
                    local_sgd_clipped(
                        &encoders[s],
                        &thetas[s],
                        &data,
                        eta,
                        config.mc_samples,
                        local_seed(seed, t, s),
                        clip,
                    )
                })
                .collect::<Result<_, _>>()?;
            for (s, r) in results.iter().enumerate() {
                totals[s].0 += r.estimate.value.as_f64();
                totals[s].1 += r.estimate.kl_term.as_f64();
            }
            let grads: Vec<Mlp<T>> = results.iter().map(|r| r.theta_grad.clone()).collect();
            encoders = results.into_iter().map(|r| r.encoder).collect();
            let (next, iters) =
                global_step(&thetas, &grads, w, aggregator, eta, consensus_seed(seed, t))?;
            thetas = next;
            fit.consensus_iterations += iters;
        }
        let mut total = 0.0;
        let mut kl_total = 0.0;
        let mut rows = 0usize;
        for (s, &(objective, kl)) in totals.iter().enumerate() {
            fit.log.push(EpochRecord {
                epoch,
                participant: s,
                objective,
                kl_term: kl,
            });
            total += objective;
            kl_total += kl;
            rows += config
                .batch_size
                .map_or(sizes[s], |b| (b * steps).min(sizes[s] * steps));
        }
        fit.objective_history.push(total);
        if !total.is_finite() {
            return Err(VaeError::Diverged {
                epoch,
                history: fit.objective_history,
            });
        }
        if -kl_total / (rows as f64) < COLLAPSE_KL {
            fit.collapse_epochs.push(epoch);
        }
    }
    fit.thetas = thetas;
    fit.encoders = encoders;
    Ok(fit)
}

/// Writes the training log as CSV `epoch,participant,objective,kl_term`.
pub fn write_training_log<W: std::io::Write>(log: &[EpochRecord], out: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["epoch", "participant", "objective", "kl_term"])?;
    for r in log {
        wtr.write_record([
            r.epoch.to_string(),
            r.participant.to_string(),
            r.objective.to_string(),
            r.kl_term.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Scorer for one participant's test samples.
#[derive(Clone, Debug)]
pub struct VaeScorer<'a, T: Real> {
    pub encoder: &'a Mlp<T>,
    pub decoder: &'a Mlp<T>,
    pub samples: usize,
}

impl<T: Real> VaeScorer<'_, T> {
    pub fn score(&self, x: &DVector<T>, seed: u64) -> Result<T, VaeError> {
        super::elbo::anomaly_score_mc(x, self.encoder, self.decoder, self.samples, seed)
    }
}
