use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpSpec};
use super::train::VaeFit;
use super::VaeError;
use crate::scalar::Real;

/// One network's tensors; matrices are stored as lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub spec: MlpSpec,
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w_mean: Vec<Vec<f64>>,
    pub b_mean: Vec<f64>,
    pub w_scale: Vec<Vec<f64>>,
    pub b_scale: Vec<f64>,
}

fn rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn vec<T: Real>(v: &DVector<T>) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn matrix<T: Real>(rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<T>, VaeError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(VaeError::DimensionMismatch(format!("expected a {r}x{c} tensor")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| T::lit(rows[i][j])))
}

fn vector<T: Real>(v: &[f64], n: usize) -> Result<DVector<T>, VaeError> {
    if v.len() != n {
        return Err(VaeError::DimensionMismatch(format!("expected a length-{n} tensor")));
    }
    Ok(DVector::from_iterator(n, v.iter().map(|&x| T::lit(x))))
}

impl MlpRecord {
    pub fn from_mlp<T: Real>(net: &Mlp<T>) -> Self {
        Self {
            spec: net.spec,
            w1: rows(&net.w1),
            b1: vec(&net.b1),
            w_mean: rows(&net.w_mean),
            b_mean: vec(&net.b_mean),
            w_scale: rows(&net.w_scale),
            b_scale: vec(&net.b_scale),
        }
    }

    pub fn to_mlp<T: Real>(&self) -> Result<Mlp<T>, VaeError> {
        let s = MlpSpec::new(self.spec.input_dim, self.spec.hidden_dim, self.spec.output_dim)?;
        let (i, h, o) = (s.input_dim, s.hidden_dim, s.output_dim);
        Ok(Mlp {
            spec: s,
            w1: matrix(&self.w1, h, i)?,
            b1: vector(&self.b1, h)?,
            w_mean: matrix(&self.w_mean, o, h)?,
            b_mean: vector(&self.b_mean, o)?,
            w_scale: matrix(&self.w_scale, o, h)?,
            b_scale: vector(&self.b_scale, o)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeCheckpoint {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub theta: MlpRecord,
    pub encoders: Vec<MlpRecord>,
    pub epoch: usize,
    pub objective_history: Vec<f64>,
}

impl VaeCheckpoint {
    pub fn from_fit<T: Real>(fit: &VaeFit<T>) -> Self {
        let theta = fit.theta();
        Self {
            input_dim: theta.spec.output_dim,
            latent_dim: theta.spec.input_dim,
            hidden_dim: theta.spec.hidden_dim,
            theta: MlpRecord::from_mlp(theta),
            encoders: fit.encoders.iter().map(MlpRecord::from_mlp).collect(),
            epoch: fit.objective_history.len(),
            objective_history: fit.objective_history.clone(),
        }
    }

    pub fn to_params<T: Real>(&self) -> Result<(Mlp<T>, Vec<Mlp<T>>), VaeError> {
        let theta = self.theta.to_mlp()?;
        let encoders = self
            .encoders
            .iter()
            .map(|e| e.to_mlp())
            .collect::<Result<Vec<_>, _>>()?;
        let expected = MlpSpec::new(self.input_dim, self.hidden_dim, self.latent_dim)?;
        if theta.spec != MlpSpec::new(self.latent_dim, self.hidden_dim, self.input_dim)?
            || encoders.iter().any(|e| e.spec != expected)
        {
            return Err(VaeError::DimensionMismatch("checkpoint network shapes".into()));
        }
        Ok((theta, encoders))
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
