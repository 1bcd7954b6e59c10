use nalgebra::{DMatrix, DVector};

use super::mlp::Mlp;
use super::VaeError;
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::{ln_two_pi, Real};

/// Monte-Carlo estimate of one participant's lower bound
/// `Σ_n [kl_n + (1/J) Σ_j ln N(x_n | μ_θ(z_nj), diag σ_θ(z_nj)²)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate<T: Real> {
    pub value: T,
    /// `½ Σ_n [ln|H| + d − tr H − ||m||²]`, i.e. minus the KL divergence from
    /// the prior.
    pub kl_term: T,
    pub recon_term: T,
    pub samples: usize,
    pub seed: u64,
}

/// Gradients of the same estimate (same draws) with respect to the encoder
/// and decoder parameters.
#[derive(Clone, Debug)]
pub struct ElboGrad<T: Real> {
    pub estimate: ElboEstimate<T>,
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
}

/// `½ [Σ ln h² + d − Σ h² − ||m||²]` for one sample.
pub fn kl_term<T: Real>(m: &DVector<T>, h: &DVector<T>) -> T {
    let d = T::from_usize_lossy(m.len());
    let log_det = h.iter().fold(T::zero(), |a, &v| a + T::lit(2.0) * v.ln());
    T::lit(0.5) * (log_det + d - h.norm_squared() - m.norm_squared())
}

/// `ln N(x | μ, diag σ²)`.
pub fn diag_gaussian_log_density<T: Real>(x: &DVector<T>, mu: &DVector<T>, sigma: &DVector<T>) -> T {
    let half = T::lit(0.5);
    let mut acc = -half * T::from_usize_lossy(x.len()) * ln_two_pi::<T>();
    for i in 0..x.len() {
        let r = (x[i] - mu[i]) / sigma[i];
        acc -= sigma[i].ln() + half * r * r;
    }
    acc
}

/// Standard normal draws `v[n][j]`, consumed in sample-major order.
pub fn mc_draws<T: Real>(n: usize, j: usize, d: usize, seed: u64) -> Vec<Vec<DVector<T>>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            (0..j)
                .map(|_| DVector::from_fn(d, |_, _| standard_normal::<T, _>(&mut rng)))
                .collect()
        })
        .collect()
}

pub(crate) fn check_shapes<T: Real>(
    encoder: &Mlp<T>,
    decoder: &Mlp<T>,
    m: usize,
) -> Result<(), VaeError> {
    let (e, d) = (encoder.spec, decoder.spec);
    if e.input_dim != m || d.output_dim != m {
        return Err(VaeError::DimensionMismatch(format!(
            "data has {m} features, encoder takes {}, decoder emits {}",
            e.input_dim, d.output_dim
        )));
    }
    if e.output_dim != d.input_dim {
        return Err(VaeError::DimensionMismatch(format!(
            "encoder latent size {} differs from decoder input {}",
            e.output_dim, d.input_dim
        )));
    }
    Ok(())
}

/// Lower bound contribution of one sample for a given encoding `(m, h)` and
/// draws, optionally backpropagating. Returns `(kl, recon)`; when `grads` is
/// given, adds the decoder gradient and returns `(d/dm, d/dh)` through `out`.
fn sample_terms<T: Real>(
    x: &DVector<T>,
    m: &DVector<T>,
    h: &DVector<T>,
    draws: &[DVector<T>],
    decoder: &Mlp<T>,
    mut grads: Option<(&mut Mlp<T>, &mut DVector<T>, &mut DVector<T>)>,
) -> (T, T) {
    let kl = kl_term(m, h);
    let inv_j = T::one() / T::from_usize_lossy(draws.len());
    let mut recon = T::zero();
    if let Some((_, dm, dh)) = grads.as_mut() {
        **dm = -m;
        **dh = h.map(|v| T::one() / v - v);
    }
    for v in draws {
        let z = h.component_mul(v) + m;
        let fwd = decoder.forward_cached(&z);
        recon += inv_j * diag_gaussian_log_density(x, &fwd.mean, &fwd.scale);
        if let Some((dec_grad, dm, dh)) = grads.as_mut() {
            let var = fwd.scale.map(|s| s * s);
            let resid = x - &fwd.mean;
            let d_mean = resid.component_div(&var) * inv_j;
            let d_scale = DVector::from_fn(x.len(), |i, _| {
                let s = fwd.scale[i];
                (-T::one() / s + resid[i] * resid[i] / (s * s * s)) * inv_j
            });
            let dz = decoder.backward(&fwd, &z, &d_mean, &d_scale, dec_grad);
            **dm += &dz;
            **dh += dz.component_mul(v);
        }
    }
    (kl, recon)
}

fn evaluate<T: Real>(
    encoder: &Mlp<T>,
    decoder: &Mlp<T>,
    data: &DMatrix<T>,
    samples: usize,
    seed: u64,
    with_grad: bool,
) -> Result<(ElboEstimate<T>, Option<(Mlp<T>, Mlp<T>)>), VaeError> {
    if samples == 0 {
        return Err(VaeError::InvalidSamples);
    }
    check_shapes(encoder, decoder, data.ncols())?;
    let d = encoder.spec.output_dim;
    let draws = mc_draws::<T>(data.nrows(), samples, d, seed);
    let mut enc_grad = Mlp::zeros(encoder.spec);
    let mut dec_grad = Mlp::zeros(decoder.spec);
    let (mut kl, mut recon) = (T::zero(), T::zero());
    for n in 0..data.nrows() {
        let x: DVector<T> = data.row(n).transpose();
        let fwd = encoder.forward_cached(&x);
        if with_grad {
            let mut dm = DVector::zeros(d);
            let mut dh = DVector::zeros(d);
            let (k, r) = sample_terms(
                &x,
                &fwd.mean,
                &fwd.scale,
                &draws[n],
                decoder,
                Some((&mut dec_grad, &mut dm, &mut dh)),
            );
            encoder.backward(&fwd, &x, &dm, &dh, &mut enc_grad);
            kl += k;
            recon += r;
        } else {
            let (k, r) = sample_terms(&x, &fwd.mean, &fwd.scale, &draws[n], decoder, None);
            kl += k;
            recon += r;
        }
    }
    let estimate = ElboEstimate {
        value: kl + recon,
        kl_term: kl,
        recon_term: recon,
        samples,
        seed,
    };
    Ok((estimate, with_grad.then_some((enc_grad, dec_grad))))
}

pub fn elbo<T: Real>(
    encoder: &Mlp<T>,
    decoder: &Mlp<T>,
    data: &DMatrix<T>,
    samples: usize,
    seed: u64,
) -> Result<ElboEstimate<T>, VaeError> {
    Ok(evaluate(encoder, decoder, data, samples, seed, false)?.0)
}

/// Exact gradient of the `samples`-draw estimate returned by [`elbo`] with
/// the same seed.
pub fn elbo_grad<T: Real>(
    encoder: &Mlp<T>,
    decoder: &Mlp<T>,
    data: &DMatrix<T>,
    samples: usize,
    seed: u64,
) -> Result<ElboGrad<T>, VaeError> {
    let (estimate, grads) = evaluate(encoder, decoder, data, samples, seed, true)?;
    let (enc, dec) = grads.expect("gradients requested");
    if !enc.is_finite() || !dec.is_finite() {
        return Err(VaeError::NonFinite(format!(
            "gradient at objective {}",
            estimate.value
        )));
    }
    Ok(ElboGrad {
        estimate,
        encoder: enc,
        decoder: dec,
    })
}

/// Terms of the bound for one sample at an explicit encoding `(m, h)`,
/// bypassing the encoder network. `h` may contain zeros (point mass).
pub fn elbo_at_encoding<T: Real>(
    x: &DVector<T>,
    m: &DVector<T>,
    h: &DVector<T>,
    decoder: &Mlp<T>,
    samples: usize,
    seed: u64,
) -> Result<ElboEstimate<T>, VaeError> {
    if samples == 0 {
        return Err(VaeError::InvalidSamples);
    }
    if m.len() != decoder.spec.input_dim || h.len() != m.len() || x.len() != decoder.spec.output_dim
    {
        return Err(VaeError::DimensionMismatch("encoding or sample size".into()));
    }
    let draws = mc_draws::<T>(1, samples, m.len(), seed);
    let (kl, recon) = sample_terms(x, m, h, &draws[0], decoder, None);
    Ok(ElboEstimate {
        value: kl + recon,
        kl_term: kl,
        recon_term: recon,
        samples,
        seed,
    })
}

/// Reconstruction-probability score `−(1/J) Σ_j ln N(x | μ_θ(z_j), diag σ_θ(z_j)²)`
/// with `z_j ~ N(m_φ(x), diag h_φ(x)²)`.
pub fn anomaly_score_mc<T: Real>(
    x: &DVector<T>,
    encoder: &Mlp<T>,
    decoder: &Mlp<T>,
    samples: usize,
    seed: u64,
) -> Result<T, VaeError> {
    if samples == 0 {
        return Err(VaeError::InvalidSamples);
    }
    check_shapes(encoder, decoder, x.len())?;
    let (m, h) = encoder.forward(x)?;
    Ok(score_at_encoding(x, &m, &h, decoder, samples, seed))
}

pub(crate) fn score_at_encoding<T: Real>(
    x: &DVector<T>,
    m: &DVector<T>,
    h: &DVector<T>,
    decoder: &Mlp<T>,
    samples: usize,
    seed: u64,
) -> T {
    let draws = mc_draws::<T>(1, samples, m.len(), seed);
    let inv_j = T::one() / T::from_usize_lossy(samples);
    draws[0].iter().fold(T::zero(), |acc, v| {
        let z = h.component_mul(v) + m;
        let (mu, sigma) = {
            let f = decoder.forward_cached(&z);
            (f.mean, f.scale)
        };
        acc - inv_j * diag_gaussian_log_density(x, &mu, &sigma)
    })
}
