//! Experiment orchestration: configuration, synthetic data with planted
//! ground truth, end-to-end runs and exported reports.

mod io;
mod metrics;
mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{Aggregator, ChunkedOptions, StoppingRule};
use crate::ggm::{self, GgmCheckpoint, GgmConfig, GgmHyper, GgmScorer, GlassoOptions};
use crate::mtvae::{self, EpochRecord, VaeCheckpoint, VaeConfig};
use crate::privacy::{privacy_report, PrivacyConfig, PrivacyReport};
use crate::rng::derive_seed;
use crate::topology::{consensus_weights, spectral_gap, Graph, WeightMatrix};

pub use io::{
    labels_file, participant_file, read_dataset_csv, read_dataset_dir, read_labels_csv,
    write_dataset_csv, write_dataset_dir, write_labels_csv,
};
pub use metrics::{auc, StageTiming, Stopwatch};
pub use synthetic::{
    holdout_split, PlantedConfig, SyntheticData, SyntheticSource, SyntheticSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Graph,
    Data,
    Fit,
    Score,
    Privacy,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Graph => "graph",
            Stage::Data => "data",
            Stage::Fit => "fit",
            Stage::Score => "score",
            Stage::Privacy => "privacy",
            Stage::Export => "export",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {detail}")]
pub struct HarnessError {
    pub stage: Stage,
    pub detail: String,
}

impl HarnessError {
    pub fn new(stage: Stage, detail: impl Into<String>) -> Self {
        Self {
            stage,
            detail: detail.into(),
        }
    }
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, HarnessError>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::new(stage, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ggm,
    Mtvae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    InverseChord,
    Complete,
    Cycle,
    Path,
    /// Random spanning tree plus extra edges with probability `extra_prob`.
    Random,
    /// Edge-list file at `path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub kind: GraphKind,
    /// Number of nodes; defaults to the number of participants.
    pub size: Option<usize>,
    pub extra_prob: f64,
    pub path: Option<PathBuf>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            kind: GraphKind::InverseChord,
            size: None,
            extra_prob: 0.2,
            path: None,
        }
    }
}

impl GraphConfig {
    pub fn build(&self, participants: usize, seed: u64) -> Result<Graph, HarnessError> {
        let size = self.size.unwrap_or(participants);
        let g = match self.kind {
            GraphKind::InverseChord => Graph::cycle_inverse_chord(size),
            GraphKind::Complete => Graph::complete(size),
            GraphKind::Cycle => Graph::cycle(size),
            GraphKind::Path => Graph::path(size),
            GraphKind::Random => Graph::random_connected(size, self.extra_prob, seed),
            GraphKind::File => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| HarnessError::new(Stage::Graph, "graph kind 'file' needs a path"))?;
                let text = fs::read_to_string(path)
                    .map_err(|e| HarnessError::new(Stage::Graph, format!("{}: {e}", path.display())))?;
                Graph::from_edge_list(&text)
            }
        }
        .stage(Stage::Graph)?;
        if g.size() != participants {
            return Err(HarnessError::new(
                Stage::Graph,
                format!("graph has {} nodes but there are {participants} participants", g.size()),
            ));
        }
        if !g.is_connected() {
            return Err(HarnessError::new(Stage::Graph, "graph is not connected"));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    /// Use exact sums instead of simulated gossip.
    pub exact: bool,
    pub tol: f64,
    pub max_iter: usize,
    /// Tolerance relative to each element's magnitude.
    pub relative: bool,
    pub chunks: usize,
    pub relabel: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        let o = ChunkedOptions::default();
        Self {
            exact: false,
            tol: o.rule.tol,
            max_iter: o.rule.max_iter,
            relative: true,
            chunks: o.chunks,
            relabel: o.relabel,
        }
    }
}

impl ConsensusConfig {
    pub fn aggregator(&self) -> Aggregator {
        if self.exact {
            Aggregator::Exact
        } else {
            Aggregator::Gossip(ChunkedOptions {
                rule: StoppingRule {
                    tol: self.tol,
                    max_iter: self.max_iter,
                    relative: self.relative,
                },
                chunks: self.chunks,
                relabel: self.relabel,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GgmSection {
    pub k: usize,
    pub lambda0: f64,
    pub rho: f64,
    pub delta: f64,
    /// Prior mean; zero when absent.
    pub m0: Option<Vec<f64>>,
    pub max_rounds: usize,
    pub tol: f64,
    pub init_noise: f64,
    pub glasso: GlassoOptions,
}

impl Default for GgmSection {
    fn default() -> Self {
        Self {
            k: 2,
            lambda0: 1.0,
            rho: 0.1,
            delta: 1.0,
            m0: None,
            max_rounds: 200,
            tol: 1e-5,
            init_noise: 1e-2,
            glasso: GlassoOptions::default(),
        }
    }
}

impl GgmSection {
    pub fn to_config(&self, dim: usize) -> Result<GgmConfig<f64>, HarnessError> {
        let m0 = match &self.m0 {
            Some(v) if v.len() != dim => {
                return Err(HarnessError::new(
                    Stage::Config,
                    format!("m0 has length {}, data has {dim} features", v.len()),
                ))
            }
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(dim),
        };
        let hyper = GgmHyper {
            lambda0: self.lambda0,
            m0,
            rho: self.rho,
            delta: self.delta,
        };
        hyper.validate().stage(Stage::Config)?;
        Ok(GgmConfig {
            k: self.k,
            hyper,
            max_rounds: self.max_rounds,
            tol: self.tol,
            glasso: self.glasso,
            init_noise: self.init_noise,
        })
    }
}

/// Multi-task VAE settings. Defaults favor mini-batch SGD with gradient
/// clipping, which trains reliably on the planted synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeSection {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub grad_clip: Option<f64>,
    /// Monte-Carlo draws per test-sample score.
    pub score_samples: usize,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_dim: 16,
            learning_rate: 1e-3,
            mc_samples: 8,
            epochs: 400,
            batch_size: Some(8),
            grad_clip: Some(100.0),
            score_samples: 64,
        }
    }
}

impl VaeSection {
    pub fn to_config(&self) -> VaeConfig {
        VaeConfig {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            learning_rate: self.learning_rate,
            mc_samples: self.mc_samples,
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
        }
    }
}

/// Where participant data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory of `participant_NNN.csv` files; overrides `synthetic`.
    pub directory: Option<PathBuf>,
    pub synthetic: SyntheticSource,
    /// Fraction of each participant's data held out for scoring.
    pub holdout: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            directory: None,
            synthetic: SyntheticSource::Planted(PlantedConfig::default()),
            holdout: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub seed: u64,
    pub graph: GraphConfig,
    pub consensus: ConsensusConfig,
    pub data: DataConfig,
    pub ggm: GgmSection,
    pub mtvae: VaeSection,
    pub privacy: PrivacyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Ggm,
            seed: 0,
            graph: GraphConfig::default(),
            consensus: ConsensusConfig::default(),
            data: DataConfig::default(),
            ggm: GgmSection::default(),
            mtvae: VaeSection::default(),
            privacy: PrivacyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).stage(Stage::Config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub objective: f64,
    /// Largest relative parameter change (GGM rounds).
    pub change: Option<f64>,
    /// Number of patterns after pruning (GGM rounds).
    pub patterns: Option<usize>,
    pub consensus_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub participant: usize,
    /// Row of the participant's full dataset.
    pub index: usize,
    pub score: f64,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Configuration with every default filled in.
    pub config: ExperimentConfig,
    pub participants: usize,
    pub dim: usize,
    pub spectral_gap: f64,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
    pub scores: Vec<ScoreRow>,
    pub auc: Option<f64>,
    pub privacy: Option<PrivacyReport>,
    pub warnings: Vec<String>,
    pub timings: Timings,
}

impl RunReport {
    /// Every total consensus iteration count, in round order.
    pub fn consensus_iterations(&self) -> Vec<usize> {
        self.history.iter().map(|h| h.consensus_iterations).collect()
    }
}

/// A finished run: the report plus the trained model.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub ggm: Option<GgmCheckpoint>,
    pub mtvae: Option<VaeCheckpoint>,
    pub training_log: Vec<EpochRecord>,
}

struct Split {
    train: Vec<DMatrix<f64>>,
    test: Vec<(usize, Vec<usize>, DMatrix<f64>)>,
    test_labels: Vec<Vec<bool>>,
}

fn load_data(config: &ExperimentConfig) -> Result<(Vec<DMatrix<f64>>, Option<Vec<Vec<bool>>>), HarnessError> {
    match &config.data.directory {
        Some(dir) => read_dataset_dir(dir),
        None => {
            let spec = config.data.synthetic.resolve(derive_seed(config.seed, &[10]))?;
            let data = spec.generate()?;
            Ok((data.datasets, Some(data.labels)))
        }
    }
}

fn split(
    datasets: &[DMatrix<f64>],
    labels: Option<&[Vec<bool>]>,
    fraction: f64,
    seed: u64,
) -> Result<Split, HarnessError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(HarnessError::new(Stage::Config, "holdout must be in [0, 1)"));
    }
    let mut out = Split {
        train: Vec::new(),
        test: Vec::new(),
        test_labels: Vec::new(),
    };
    for (s, d) in datasets.iter().enumerate() {
        let l = labels.map_or_else(|| vec![false; d.nrows()], |l| l[s].clone());
        let (tr, te) = holdout_split(&l, fraction, derive_seed(seed, &[s as u64]));
        if tr.is_empty() {
            return Err(HarnessError::new(Stage::Data, format!("participant {s} has no training data")));
        }
        out.train.push(d.select_rows(&tr));
        out.test_labels.push(te.iter().map(|&i| l[i]).collect());
        out.test.push((s, te.clone(), d.select_rows(&te)));
    }
    Ok(out)
}

/// Builds the graph, generates or loads data, trains the configured model
/// with CollabDict, scores the held-out samples and (GGM only) audits
/// privacy.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let mut clock = Stopwatch::new();
    let seed = config.seed;
    let mut warnings = Vec::new();

    let (datasets, labels) = load_data(config)?;
    let s_count = datasets.len();
    let dim = datasets[0].ncols();
    if labels.is_none() {
        warnings.push("no labels found; every test sample is treated as normal".into());
    }
    let parts = split(&datasets, labels.as_deref(), config.data.holdout, derive_seed(seed, &[11]))?;
    clock.lap("data");

    let graph = config.graph.build(s_count, derive_seed(seed, &[12]))?;
    let w: WeightMatrix<f64> = consensus_weights(&graph);
    let gap = spectral_gap(&w).stage(Stage::Graph)?;
    if !gap.contraction_ok {
        return Err(HarnessError::new(Stage::Graph, "consensus weights do not contract"));
    }
    let aggregator = config.consensus.aggregator();
    clock.lap("graph");

    let fit_seed = derive_seed(seed, &[13]);
    let score_seed = derive_seed(seed, &[14]);
    let mut history = Vec::new();
    let converged;
    let mut scores = Vec::new();
    let mut privacy = None;
    let mut ggm_ck = None;
    let mut vae_ck = None;
    let mut training_log = Vec::new();

    match config.model {
        ModelKind::Ggm => {
            let gcfg = config.ggm.to_config(dim)?;
            let fit = ggm::fit(&parts.train, &w, &gcfg, &aggregator, fit_seed).stage(Stage::Fit)?;
            converged = fit.converged;
            if !converged {
                warnings.push(format!("GGM did not converge in {} rounds", gcfg.max_rounds));
            }
            history = fit
                .history
                .iter()
                .map(|r| HistoryEntry {
                    step: r.round,
                    objective: r.objective,
                    change: Some(r.max_relative_change),
                    patterns: Some(r.k),
                    consensus_iterations: r.consensus_iterations,
                })
                .collect();
            clock.lap("fit");

            for (s, rows, test) in &parts.test {
                let scorer =
                    GgmScorer::new(&fit.locals[*s].weights, &fit.views[*s]).stage(Stage::Score)?;
                for (j, &idx) in rows.iter().enumerate() {
                    scores.push(ScoreRow {
                        participant: *s,
                        index: idx,
                        score: scorer.score(&test.row(j).transpose()),
                        label: parts.test_labels[*s][j],
                    });
                }
            }
            clock.lap("score");

            let weights = fit.weights();
            let rep = privacy_report(
                &parts.train,
                fit.global(),
                &weights,
                &config.privacy,
                derive_seed(seed, &[15]),
            )
            .stage(Stage::Privacy)?;
            if rep.audit.violations > 0 {
                warnings.push(format!("{} privacy audit violations", rep.audit.violations));
            }
            for c in &rep.components {
                if !c.within_bound {
                    warnings.push(format!(
                        "pattern {}: spectral norm {:e} exceeds bound {:e}",
                        c.component, c.spectral_norm, c.bound
                    ));
                }
                if c.residual.abs() >= 1e-9 {
                    warnings.push(format!(
                        "pattern {}: norm-bound residual {:e} (bound {:e} beyond f64 resolution)",
                        c.component, c.residual, c.bound
                    ));
                }
            }
            privacy = Some(rep);
            ggm_ck = Some(GgmCheckpoint::from_model(fit.global(), &weights));
            clock.lap("privacy");
        }
        ModelKind::Mtvae => {
            let vcfg = &config.mtvae.to_config();
            let fit = mtvae::fit(&parts.train, &w, vcfg, &aggregator, fit_seed).stage(Stage::Fit)?;
            converged = true;
            let mut at = 0;
            for (e, total) in fit.objective_history.iter().enumerate() {
                history.push(HistoryEntry {
                    step: e,
                    objective: *total,
                    change: None,
                    patterns: None,
                    consensus_iterations: 0,
                });
                at += 1;
            }
            debug_assert_eq!(at, vcfg.epochs);
            if !fit.collapse_epochs.is_empty() {
                warnings.push(format!(
                    "possible posterior collapse in {} epochs (mean KL < 1e-3)",
                    fit.collapse_epochs.len()
                ));
            }
            clock.lap("fit");

            for (s, rows, test) in &parts.test {
                for (j, &idx) in rows.iter().enumerate() {
                    let score = mtvae::anomaly_score_mc(
                        &test.row(j).transpose(),
                        &fit.encoders[*s],
                        &fit.thetas[*s],
                        config.mtvae.score_samples,
                        derive_seed(score_seed, &[*s as u64, idx as u64]),
                    )
                    .stage(Stage::Score)?;
                    scores.push(ScoreRow {
                        participant: *s,
                        index: idx,
                        score,
                        label: parts.test_labels[*s][j],
                    });
                }
            }
            clock.lap("score");
            training_log = fit.log.clone();
            vae_ck = Some(VaeCheckpoint::from_fit(&fit));
        }
    }

    let score_values: Vec<f64> = scores.iter().map(|r| r.score).collect();
    let score_labels: Vec<bool> = scores.iter().map(|r| r.label).collect();
    let auc_value = auc(&score_values, &score_labels);
    if auc_value.is_none() {
        warnings.push("AUC undefined: the test set lacks normal or anomalous samples".into());
    }
    let (stages, total_seconds) = clock.finish();
    let report = RunReport {
        config: config.clone(),
        participants: s_count,
        dim,
        spectral_gap: gap.gap,
        train_sizes: parts.train.iter().map(|d| d.nrows()).collect(),
        test_sizes: parts.test.iter().map(|t| t.1.len()).collect(),
        history,
        converged,
        scores,
        auc: auc_value,
        privacy,
        warnings,
        timings: Timings {
            stages,
            total_seconds,
        },
    };
    Ok(RunOutput {
        report,
        ggm: ggm_ck,
        mtvae: vae_ck,
        training_log,
    })
}

fn export_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::new(Stage::Export, format!("{}: {e}", path.display()))
}

/// Writes `report.json` and `scores.csv` (`participant,index,score,label`)
/// into `dir`.
pub fn export_report(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| export_err(dir, e))?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| export_err(&path, e))?;
    fs::write(&path, text).map_err(|e| export_err(&path, e))?;
    let path = dir.join("scores.csv");
    let mut wtr = csv::Writer::from_path(&path).map_err(|e| export_err(&path, e))?;
    wtr.write_record(["participant", "index", "score", "label"])
        .map_err(|e| export_err(&path, e))?;
    for r in &report.scores {
        wtr.write_record([
            r.participant.to_string(),
            r.index.to_string(),
            format!("{:?}", r.score),
            u8::from(r.label).to_string(),
        ])
        .map_err(|e| export_err(&path, e))?;
    }
    wtr.flush().map_err(|e| export_err(&path, e))
}

/// [`export_report`] plus `model.json` and, for the VAE, `training_log.csv`.
pub fn export_run(output: &RunOutput, dir: &Path) -> Result<(), HarnessError> {
    export_report(&output.report, dir)?;
    let model = dir.join("model.json");
    if let Some(ck) = &output.ggm {
        ck.save(&model).map_err(|e| export_err(&model, e))?;
    }
    if let Some(ck) = &output.mtvae {
        ck.save(&model).map_err(|e| export_err(&model, e))?;
        let path = dir.join("training_log.csv");
        let file = fs::File::create(&path).map_err(|e| export_err(&path, e))?;
        mtvae::write_training_log(&output.training_log, file).map_err(|e| export_err(&path, e))?;
    }
    Ok(())
}

pub fn load_report(dir: &Path) -> Result<RunReport, HarnessError> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| export_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| export_err(&path, e))
}

/// Privacy report for a saved GGM checkpoint on a data directory.
pub fn audit_checkpoint(
    model: &Path,
    data_dir: &Path,
    config: &PrivacyConfig,
    seed: u64,
) -> Result<PrivacyReport, HarnessError> {
    let ck = GgmCheckpoint::load(model).map_err(|e| HarnessError::new(Stage::Config, format!("{}: {e}", model.display())))?;
    let (global, weights) = ck.to_model::<f64>().stage(Stage::Config)?;
    let (datasets, _) = read_dataset_dir(data_dir)?;
    if weights.len() != datasets.len() {
        return Err(HarnessError::new(
            Stage::Data,
            format!("checkpoint has {} participants, data has {}", weights.len(), datasets.len()),
        ));
    }
    privacy_report(&datasets, &global, &weights, config, seed).stage(Stage::Privacy)
}
