use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::VaeError;
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::Real;

/// Shape of the one-hidden-layer network used for both encoder and decoder:
/// `g = relu(W1 x + b1)`, `mean = Wm g + bm`, `scale = softplus(Ws g + bs)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self, VaeError> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(VaeError::InvalidSpec(format!(
                "dimensions must be positive, got {input_dim}/{hidden_dim}/{output_dim}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        h * i + h + 2 * (o * h + o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real> {
    pub spec: MlpSpec,
    pub w1: DMatrix<T>,
    pub b1: DVector<T>,
    pub w_mean: DMatrix<T>,
    pub b_mean: DVector<T>,
    pub w_scale: DMatrix<T>,
    pub b_scale: DVector<T>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Forward<T: Real> {
    pub pre_hidden: DVector<T>,
    pub hidden: DVector<T>,
    pub mean: DVector<T>,
    pub pre_scale: DVector<T>,
    pub scale: DVector<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Self {
        let (i, h, o) = (spec.input_dim, spec.hidden_dim, spec.output_dim);
        Self {
            spec,
            w1: DMatrix::zeros(h, i),
            b1: DVector::zeros(h),
            w_mean: DMatrix::zeros(o, h),
            b_mean: DVector::zeros(o),
            w_scale: DMatrix::zeros(o, h),
            b_scale: DVector::zeros(o),
        }
    }

    /// Hidden and mean-head weights drawn from `N(0, 1/fan_in)`, other
    /// biases zero. The scale head starts constant at 1.
    pub fn random(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut net = Self::zeros(spec);
        let s1 = T::one() / T::from_usize_lossy(spec.input_dim).sqrt();
        let s2 = T::one() / T::from_usize_lossy(spec.hidden_dim).sqrt();
        for v in net.w1.iter_mut() {
            *v = standard_normal::<T, _>(&mut rng) * s1;
        }
        for v in net.w_mean.iter_mut() {
            *v = standard_normal::<T, _>(&mut rng) * s2;
        }
        net.b_scale.fill(T::lit(std::f64::consts::E - 1.0).ln());
        net
    }

    /// Random weights everywhere, scale head included (for tests).
    pub fn random_full(spec: MlpSpec, seed: u64, scale: T) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut net = Self::zeros(spec);
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                *v = standard_normal::<T, _>(&mut rng) * scale;
            }
        }
        net
    }

    /// `(mean, scale)` for input `x`; rejects a wrongly sized input.
    pub fn forward(&self, x: &DVector<T>) -> Result<(DVector<T>, DVector<T>), VaeError> {
        if x.len() != self.spec.input_dim {
            return Err(VaeError::DimensionMismatch(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let f = self.forward_cached(x);
        Ok((f.mean, f.scale))
    }

    pub fn forward_cached(&self, x: &DVector<T>) -> Forward<T> {
        let pre_hidden = &self.w1 * x + &self.b1;
        let hidden = pre_hidden.map(|a| a.max(T::zero()));
        let mean = &self.w_mean * &hidden + &self.b_mean;
        let pre_scale = &self.w_scale * &hidden + &self.b_scale;
        let scale = pre_scale.map(|a| a.softplus());
        Forward {
            pre_hidden,
            hidden,
            mean,
            pre_scale,
            scale,
        }
    }

    /// Accumulates parameter gradients into `grad` given the output
    /// sensitivities, and returns the sensitivity of the input.
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        x: &DVector<T>,
        d_mean: &DVector<T>,
        d_scale: &DVector<T>,
        grad: &mut Mlp<T>,
    ) -> DVector<T> {
        let d_pre_scale = d_scale.zip_map(&fwd.pre_scale, |d, a| d * a.sigmoid());
        grad.w_mean.ger(T::one(), d_mean, &fwd.hidden, T::one());
        grad.b_mean += d_mean;
        grad.w_scale.ger(T::one(), &d_pre_scale, &fwd.hidden, T::one());
        grad.b_scale += &d_pre_scale;
        let d_hidden = self.w_mean.tr_mul(d_mean) + self.w_scale.tr_mul(&d_pre_scale);
        let d_pre_hidden = d_hidden.zip_map(&fwd.pre_hidden, |d, a| {
            if a > T::zero() {
                d
            } else {
                T::zero()
            }
        });
        grad.w1.ger(T::one(), &d_pre_hidden, x, T::one());
        grad.b1 += &d_pre_hidden;
        self.w1.tr_mul(&d_pre_hidden)
    }

    fn tensors(&self) -> [&[T]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w_mean.as_slice(),
            self.b_mean.as_slice(),
            self.w_scale.as_slice(),
            self.b_scale.as_slice(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w_mean.as_mut_slice(),
            self.b_mean.as_mut_slice(),
            self.w_scale.as_mut_slice(),
            self.b_scale.as_mut_slice(),
        ]
    }

    /// All parameters in a fixed order (column-major within each tensor).
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn from_flat(spec: MlpSpec, flat: &[T]) -> Result<Self, VaeError> {
        if flat.len() != spec.num_params() {
            return Err(VaeError::DimensionMismatch(format!(
                "{} parameters for a network with {}",
                flat.len(),
                spec.num_params()
            )));
        }
        let mut net = Self::zeros(spec);
        let mut at = 0;
        for t in net.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(net)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Mlp<T>) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * *s;
            }
        }
    }

    pub fn norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(T::zero(), |acc, v| acc + *v * *v)
            .sqrt()
    }

    /// Rescales to Euclidean norm at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: T) {
        let n = self.norm();
        if n > max_norm {
            let f = max_norm / n;
            for t in self.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite_real()))
    }

    pub fn max_abs_diff(&self, other: &Mlp<T>) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (*x - *y).abs().as_f64()))
            .fold(0.0, f64::max)
    }
}
