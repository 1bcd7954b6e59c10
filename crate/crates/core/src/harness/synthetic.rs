use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Stage};
use crate::rng::{derive_seed, rng_from_seed, standard_normal};

/// Fully explicit planted mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub participants: usize,
    pub dim: usize,
    /// `N^s` for each participant.
    pub counts: Vec<usize>,
    /// `K_true x M`.
    pub means: Vec<Vec<f64>>,
    /// `K_true` covariance matrices, each a list of `M` rows.
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// `S x K_true` mixing weights.
    pub weights: Vec<Vec<f64>>,
    pub anomaly_rate: f64,
    /// Distance by which anomalies are moved along a random direction.
    pub anomaly_shift: f64,
    pub seed: u64,
}

/// Compact recipe from which a [`SyntheticSpec`] is drawn: well separated
/// cluster centers, unit-variance correlated covariances and
/// participant-specific weights bounded away from zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub participants: usize,
    pub dim: usize,
    pub clusters: usize,
    pub samples_per_participant: usize,
    /// Minimum distance between cluster centers; centers are drawn from
    /// `[-separation, separation]^M`.
    pub separation: f64,
    /// Largest off-diagonal correlation magnitude scale.
    pub correlation: f64,
    pub anomaly_rate: f64,
    pub anomaly_shift: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            participants: 5,
            dim: 2,
            clusters: 2,
            samples_per_participant: 200,
            separation: 6.0,
            correlation: 0.5,
            anomaly_rate: 0.05,
            anomaly_shift: 5.0,
        }
    }
}

/// Either a recipe or an explicit mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSource {
    Planted(PlantedConfig),
    Explicit(SyntheticSpec),
}

impl SyntheticSource {
    pub fn resolve(&self, seed: u64) -> Result<SyntheticSpec, HarnessError> {
        match self {
            SyntheticSource::Planted(p) => p.to_spec(seed),
            SyntheticSource::Explicit(s) => {
                s.validate()?;
                Ok(s.clone())
            }
        }
    }
}

impl PlantedConfig {
    pub fn to_spec(&self, seed: u64) -> Result<SyntheticSpec, HarnessError> {
        let bad = |m: String| Err(HarnessError::new(Stage::Data, m));
        if self.participants == 0 || self.dim == 0 || self.clusters == 0 {
            return bad("participants, dim and clusters must be positive".into());
        }
        if self.samples_per_participant == 0 {
            return bad("samples_per_participant must be positive".into());
        }
        if !(self.separation >= 0.0) || !(0.0..1.0).contains(&self.correlation) {
            return bad("separation must be >= 0 and correlation in [0, 1)".into());
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[100]));
        let (k, m) = (self.clusters, self.dim);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while means.len() < k {
            let c: Vec<f64> = (0..m)
                .map(|_| rng.random_range(-self.separation..=self.separation))
                .collect();
            attempts += 1;
            let far = means.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
                    >= self.separation
            });
            if far || attempts > 10_000 {
                means.push(c);
            }
        }
        let covariances = (0..k)
            .map(|_| {
                let a = DMatrix::<f64>::from_fn(m, m, |_, _| standard_normal::<f64, _>(&mut rng));
                let raw = &a * a.transpose() + DMatrix::identity(m, m) * (m as f64);
                let d = raw.diagonal().map(|v| 1.0 / v.sqrt());
                let mut corr = DMatrix::identity(m, m);
                for i in 0..m {
                    for j in 0..i {
                        let v = raw[(i, j)] * d[i] * d[j] * self.correlation;
                        corr[(i, j)] = v;
                        corr[(j, i)] = v;
                    }
                }
                corr.row_iter().map(|r| r.iter().copied().collect()).collect()
            })
            .collect();
        let weights = (0..self.participants)
            .map(|_| {
                if k == 1 {
                    return vec![1.0];
                }
                let gamma = Gamma::new(2.0, 1.0).expect("valid shape");
                let g: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = g.iter().sum();
                g.iter().map(|v| 0.5 / k as f64 + 0.5 * v / total).collect()
            })
            .collect();
        let spec = SyntheticSpec {
            participants: self.participants,
            dim: m,
            counts: vec![self.samples_per_participant; self.participants],
            means,
            covariances,
            weights,
            anomaly_rate: self.anomaly_rate,
            anomaly_shift: self.anomaly_shift,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Generated data with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub datasets: Vec<DMatrix<f64>>,
    /// `true` marks an injected anomaly.
    pub labels: Vec<Vec<bool>>,
    /// Planted cluster each sample was drawn from.
    pub clusters: Vec<Vec<usize>>,
}

impl SyntheticSpec {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::new(Stage::Data, m));
        let (s, m, k) = (self.participants, self.dim, self.k());
        if s == 0 || m == 0 || k == 0 {
            return fail("participants, dim and cluster count must be positive".into());
        }
        if self.counts.len() != s || self.counts.iter().any(|&n| n == 0) {
            return fail(format!("need {s} positive sample counts"));
        }
        if self.means.iter().any(|v| v.len() != m) {
            return fail("every mean must have length dim".into());
        }
        if self.covariances.len() != k
            || self
                .covariances
                .iter()
                .any(|c| c.len() != m || c.iter().any(|r| r.len() != m))
        {
            return fail("need one dim x dim covariance per cluster".into());
        }
        for (i, c) in self.covariances.iter().enumerate() {
            if self.cholesky(i).is_none() || (0..m).any(|a| (0..m).any(|b| c[a][b] != c[b][a])) {
                return fail(format!("covariance {i} is not symmetric positive definite"));
            }
        }
        if self.weights.len() != s {
            return fail(format!("need {s} weight vectors"));
        }
        for w in &self.weights {
            let total: f64 = w.iter().sum();
            if w.len() != k || w.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (total - 1.0).abs() > 1e-9
            {
                return fail("mixing weights must lie on the simplex".into());
            }
        }
        if !(0.0..1.0).contains(&self.anomaly_rate) {
            return fail("anomaly_rate must be in [0, 1)".into());
        }
        if !self.anomaly_shift.is_finite() {
            return fail("anomaly_shift must be finite".into());
        }
        Ok(())
    }

    fn cholesky(&self, k: usize) -> Option<DMatrix<f64>> {
        let m = self.dim;
        let c = DMatrix::from_fn(m, m, |i, j| self.covariances[k][i][j]);
        c.cholesky().map(|c| c.l())
    }

    /// Draws every participant's samples. Same spec, same output.
    pub fn generate(&self) -> Result<SyntheticData, HarnessError> {
        self.validate()?;
        let m = self.dim;
        let factors: Vec<DMatrix<f64>> = (0..self.k())
            .map(|k| self.cholesky(k).expect("validated"))
            .collect();
        let mut out = SyntheticData {
            datasets: Vec::with_capacity(self.participants),
            labels: Vec::with_capacity(self.participants),
            clusters: Vec::with_capacity(self.participants),
        };
        for s in 0..self.participants {
            let mut rng = rng_from_seed(derive_seed(self.seed, &[200, s as u64]));
            let pick = WeightedIndex::new(&self.weights[s])
                .map_err(|e| HarnessError::new(Stage::Data, e.to_string()))?;
            let n = self.counts[s];
            let mut data = DMatrix::zeros(n, m);
            let mut labels = Vec::with_capacity(n);
            let mut clusters = Vec::with_capacity(n);
            for i in 0..n {
                let k = pick.sample(&mut rng);
                let z = DVector::from_fn(m, |_, _| standard_normal::<f64, _>(&mut rng));
                let mut x = &factors[k] * z + DVector::from_column_slice(&self.means[k]);
                let anomalous = rng.random::<f64>() < self.anomaly_rate;
                if anomalous {
                    let u = DVector::from_fn(m, |_, _| standard_normal::<f64, _>(&mut rng));
                    let norm = u.norm();
                    if norm > 0.0 {
                        x += u * (self.anomaly_shift / norm);
                    }
                }
                data.set_row(i, &x.transpose());
                labels.push(anomalous);
                clusters.push(k);
            }
            out.datasets.push(data);
            out.labels.push(labels);
            out.clusters.push(clusters);
        }
        Ok(out)
    }
}

/// Stratified split: `fraction` of each participant's normal samples and of
/// its anomalies go to the test set. Returns `(train, test)` row indices.
pub fn holdout_split(labels: &[bool], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = (fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
