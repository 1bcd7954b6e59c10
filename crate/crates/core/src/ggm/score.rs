use nalgebra::DVector;

use super::em::responsibilities;
use super::{GaussianComponent, GgmError, GgmGlobal};
use crate::scalar::Real;

/// Test-time scorer for one participant: the shared patterns with that
/// participant's mixture weights.
#[derive(Clone, Debug)]
pub struct GgmScorer<T: Real> {
    weights: DVector<T>,
    components: Vec<GaussianComponent<T>>,
}

impl<T: Real> GgmScorer<T> {
    pub fn new(weights: &DVector<T>, global: &GgmGlobal<T>) -> Result<Self, GgmError> {
        if weights.len() != global.k() {
            return Err(GgmError::DimensionMismatch(format!(
                "{} weights for {} components",
                weights.len(),
                global.k()
            )));
        }
        Ok(Self {
            weights: weights.clone(),
            components: global.components()?,
        })
    }

    /// Per-pattern score `(M/2) ln 2π − ½ ln|Λ_k| + ½ (x − μ_k)ᵀ Λ_k (x − μ_k)`.
    pub fn pattern_scores(&self, x: &DVector<T>) -> Vec<T> {
        self.components.iter().map(|c| -c.log_density(x)).collect()
    }

    /// Responsibility-weighted sum of the per-pattern scores.
    pub fn score(&self, x: &DVector<T>) -> T {
        let r = responsibilities(x, &self.weights, &self.components);
        self.pattern_scores(x)
            .into_iter()
            .zip(r.iter())
            .fold(T::zero(), |a, (s, &rk)| a + rk * s)
    }
}

pub fn anomaly_score<T: Real>(
    x: &DVector<T>,
    weights: &DVector<T>,
    global: &GgmGlobal<T>,
) -> Result<T, GgmError> {
    if x.len() != global.dim() {
        return Err(GgmError::DimensionMismatch(format!(
            "sample has {} features, model has {}",
            x.len(),
            global.dim()
        )));
    }
    Ok(GgmScorer::new(weights, global)?.score(x))
}
