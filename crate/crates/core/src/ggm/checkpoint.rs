use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{GgmError, GgmGlobal, GgmHyper};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperRecord {
    pub lambda0: f64,
    pub m0: Vec<f64>,
    pub rho: f64,
    pub delta: f64,
}

/// Serialized GGM model. Matrices are dense row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GgmCheckpoint {
    pub k: usize,
    pub m: usize,
    pub hyper: HyperRecord,
    pub means: Vec<Vec<f64>>,
    pub precisions: Vec<Vec<f64>>,
    /// `π^s` for every participant.
    pub weights: Vec<Vec<f64>>,
}

impl GgmCheckpoint {
    pub fn from_model<T: Real>(global: &GgmGlobal<T>, weights: &[DVector<T>]) -> Self {
        let m = global.dim();
        let h = &global.hyper;
        Self {
            k: global.k(),
            m,
            hyper: HyperRecord {
                lambda0: h.lambda0.as_f64(),
                m0: h.m0.iter().map(|v| v.as_f64()).collect(),
                rho: h.rho.as_f64(),
                delta: h.delta.as_f64(),
            },
            means: global
                .means
                .iter()
                .map(|mu| mu.iter().map(|v| v.as_f64()).collect())
                .collect(),
            precisions: global
                .precisions
                .iter()
                .map(|p| {
                    (0..m)
                        .flat_map(|i| (0..m).map(move |j| p[(i, j)].as_f64()))
                        .collect()
                })
                .collect(),
            weights: weights
                .iter()
                .map(|w| w.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<(GgmGlobal<T>, Vec<DVector<T>>), GgmError> {
        let (k, m) = (self.k, self.m);
        let bad = |what: &str| Err(GgmError::DimensionMismatch(format!("checkpoint {what}")));
        if self.means.len() != k || self.means.iter().any(|v| v.len() != m) {
            return bad("means");
        }
        if self.precisions.len() != k || self.precisions.iter().any(|v| v.len() != m * m) {
            return bad("precisions");
        }
        if self.hyper.m0.len() != m {
            return bad("prior mean");
        }
        if self.weights.iter().any(|w| w.len() != k) {
            return bad("weights");
        }
        let vec = |v: &[f64]| DVector::from_iterator(v.len(), v.iter().map(|&x| T::lit(x)));
        let hyper = GgmHyper {
            lambda0: T::lit(self.hyper.lambda0),
            m0: vec(&self.hyper.m0),
            rho: T::lit(self.hyper.rho),
            delta: T::lit(self.hyper.delta),
        };
        hyper.validate()?;
        let global = GgmGlobal {
            means: self.means.iter().map(|v| vec(v)).collect(),
            precisions: self
                .precisions
                .iter()
                .map(|p| DMatrix::from_row_iterator(m, m, p.iter().map(|&x| T::lit(x))))
                .collect(),
            hyper,
        };
        global.components()?;
        Ok((global, self.weights.iter().map(|w| vec(w)).collect()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_json() {
        let global = GgmGlobal {
            means: vec![DVector::from_vec(vec![1.0, 2.0])],
            precisions: vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])],
            hyper: GgmHyper::with_dim(2),
        };
        let weights = vec![DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)];
        let ck = GgmCheckpoint::from_model(&global, &weights);
        let text = serde_json::to_string(&ck).unwrap();
        let back: GgmCheckpoint = serde_json::from_str(&text).unwrap();
        let (g2, w2) = back.to_model::<f64>().unwrap();
        assert_eq!(g2, global);
        assert_eq!(w2, weights);
    }

    #[test]
    fn rejects_wrong_shape() {
        let mut ck = GgmCheckpoint::from_model(
            &GgmGlobal::<f64> {
                means: vec![DVector::zeros(2)],
                precisions: vec![DMatrix::identity(2, 2)],
                hyper: GgmHyper::with_dim(2),
            },
            &[],
        );
        ck.precisions[0].pop();
        assert!(ck.to_model::<f64>().is_err());
    }
}
