//! Dynamical average consensus and random chunking.
//!
//! Every participant repeatedly replaces its value by the `W`-weighted mix of
//! its own and its neighbors' values. With a connected graph all nodes
//! converge to the network mean. Random chunking splits each private value
//! into `C` additive shares and runs one consensus session per share, so the
//! first message a node sends is never its raw value.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, permutation, rng_from_seed};
use crate::scalar::Real;
use crate::topology::{Graph, WeightMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("dimension mismatch: expected {expected} participants, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("consensus did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("chunk count must be at least 1 (got {0})")]
    InvalidChunkCount(usize),
    #[error("tolerance must be positive and finite (got {0})")]
    InvalidTolerance(f64),
}

/// Values held by the participants at iteration `iteration`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusVector<T: Real> {
    pub values: Vec<T>,
    pub iteration: usize,
}

impl<T: Real> ConsensusVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self {
            values,
            iteration: 0,
        }
    }

    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_lossy(self.values.len())
    }

    /// `max - min` over participants.
    pub fn spread(&self) -> T {
        spread(self.values.iter().copied())
    }
}

fn spread<T: Real>(values: impl Iterator<Item = T>) -> T {
    let (lo, hi) = values.fold(
        (T::lit(f64::INFINITY), T::lit(f64::NEG_INFINITY)),
        |(lo, hi), v| (lo.min(v), hi.max(v)),
    );
    if hi < lo {
        T::zero()
    } else {
        hi - lo
    }
}

/// One synchronous update `ξ(t+1) = W ξ(t)`; each node reads only its own
/// entry and those of its neighbors.
pub fn step<T: Real>(
    x: &ConsensusVector<T>,
    w: &WeightMatrix<T>,
) -> Result<ConsensusVector<T>, ConsensusError> {
    check_len(w, x.values.len())?;
    let values = (0..w.size())
        .map(|s| {
            w.neighbors(s)
                .iter()
                .fold(w.entry(s, s) * x.values[s], |acc, &j| {
                    acc + w.entry(s, j) * x.values[j]
                })
        })
        .collect();
    Ok(ConsensusVector {
        values,
        iteration: x.iteration + 1,
    })
}

/// Literal neighbor-difference update
/// `ξ_s ← ξ_s + (1/S) Σ_j A_sj (ξ_j − ξ_s)`.
pub fn laplacian_step<T: Real>(x: &[T], g: &Graph) -> Result<Vec<T>, ConsensusError> {
    if x.len() != g.size() {
        return Err(ConsensusError::DimensionMismatch {
            expected: g.size(),
            got: x.len(),
        });
    }
    let inv_s = T::one() / T::from_usize_lossy(g.size());
    Ok((0..g.size())
        .map(|s| {
            let pull = g
                .neighbors(s)
                .fold(T::zero(), |acc, j| acc + (x[j] - x[s]));
            x[s] + inv_s * pull
        })
        .collect())
}

fn check_len<T: Real>(w: &WeightMatrix<T>, got: usize) -> Result<(), ConsensusError> {
    if w.size() != got {
        Err(ConsensusError::DimensionMismatch {
            expected: w.size(),
            got,
        })
    } else {
        Ok(())
    }
}

fn check_tol(tol: f64) -> Result<(), ConsensusError> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(ConsensusError::InvalidTolerance(tol))
    }
}

/// A single value sent from `from` to its neighbor `to`.
#[derive(Clone, Debug, PartialEq)]
pub struct Message<T: Real> {
    pub session: usize,
    pub iteration: usize,
    pub from: usize,
    pub to: usize,
    pub element: usize,
    pub value: T,
}

/// Records every value put on the wire. Participant ids are logged, not
/// node positions, so relabeled sessions stay comparable.
#[derive(Clone, Debug, Default)]
pub struct MessageLog<T: Real> {
    pub messages: Vec<Message<T>>,
    /// Only iterations `< limit` are recorded when set.
    pub iteration_limit: Option<usize>,
}

impl<T: Real> MessageLog<T> {
    pub fn new() -> Self {
        Self {
            messages: Vec::new(),
            iteration_limit: None,
        }
    }

    pub fn first_iterations(limit: usize) -> Self {
        Self {
            messages: Vec::new(),
            iteration_limit: Some(limit),
        }
    }

    fn wants(&self, iteration: usize) -> bool {
        self.iteration_limit.is_none_or(|l| iteration < l)
    }

    /// Messages sent during iteration `iteration` (the first exchange is 0).
    pub fn at_iteration(&self, iteration: usize) -> impl Iterator<Item = &Message<T>> {
        self.messages
            .iter()
            .filter(move |m| m.iteration == iteration)
    }
}

/// Result of running consensus on a batch of `E` elements at once.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome<T: Real> {
    /// `S x E`; row `s` is what participant `s` ends up holding.
    pub values: DMatrix<T>,
    pub iterations: usize,
}

/// Stopping rule: stop at the first iterate where all participants agree to
/// within `tol` on every element. Since every update is a convex combination
/// of current values, the following iterate then also moves each entry by
/// less than `tol`, and since the sum is conserved every entry is within
/// `tol` of the true mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub tol: f64,
    pub max_iter: usize,
    /// Measure each element's spread relative to `max(1, max_s |x0_s|)`
    /// instead of absolutely. Needed when values are large enough that
    /// rounding keeps the absolute spread above `tol`.
    #[serde(default)]
    pub relative: bool,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100_000,
            relative: false,
        }
    }
}

/// Batched consensus: one iteration loop drives every column of `x0`
/// (rows are participants).
pub fn run_batch<T: Real>(
    x0: &DMatrix<T>,
    w: &WeightMatrix<T>,
    rule: StoppingRule,
    log: Option<&mut MessageLog<T>>,
) -> Result<BatchOutcome<T>, ConsensusError> {
    run_batch_placed(x0, w, rule, None, 0, log)
}

/// `placement[s]` is the node participant `s` occupies for this session.
fn run_batch_placed<T: Real>(
    x0: &DMatrix<T>,
    w: &WeightMatrix<T>,
    rule: StoppingRule,
    placement: Option<&[usize]>,
    session: usize,
    mut log: Option<&mut MessageLog<T>>,
) -> Result<BatchOutcome<T>, ConsensusError> {
    check_len(w, x0.nrows())?;
    check_tol(rule.tol)?;
    let s_count = x0.nrows();
    let e_count = x0.ncols();
    let tol = T::lit(rule.tol);

    let identity: Vec<usize> = (0..s_count).collect();
    let place = placement.unwrap_or(&identity);
    let mut occupant = vec![0; s_count];
    for (s, &node) in place.iter().enumerate() {
        occupant[node] = s;
    }

    let mut cur = DMatrix::<T>::zeros(s_count, e_count);
    for s in 0..s_count {
        cur.set_row(place[s], &x0.row(s));
    }
    let scales: Vec<T> = (0..e_count)
        .map(|e| {
            if rule.relative {
                x0.column(e).iter().fold(T::one(), |a, v| a.max(v.abs()))
            } else {
                T::one()
            }
        })
        .collect();
    let max_spread = |m: &DMatrix<T>| {
        (0..e_count)
            .map(|e| spread(m.column(e).iter().copied()) / scales[e])
            .fold(T::zero(), |a, b| a.max(b))
    };

    let mut next = cur.clone();
    let mut iterations = 0;
    let mut residual = max_spread(&cur);
    if residual >= tol {
        loop {
            if iterations >= rule.max_iter {
                return Err(ConsensusError::NotConverged {
                    iterations,
                    residual: residual.as_f64(),
                });
            }
            if let Some(log) = log.as_deref_mut() {
                if log.wants(iterations) {
                    for node in 0..s_count {
                        for &nb in w.neighbors(node) {
                            for e in 0..e_count {
                                log.messages.push(Message {
                                    session,
                                    iteration: iterations,
                                    from: occupant[nb],
                                    to: occupant[node],
                                    element: e,
                                    value: cur[(nb, e)],
                                });
                            }
                        }
                    }
                }
            }
            for node in 0..s_count {
                for e in 0..e_count {
                    let v = w
                        .neighbors(node)
                        .iter()
                        .fold(w.entry(node, node) * cur[(node, e)], |acc, &j| {
                            acc + w.entry(node, j) * cur[(j, e)]
                        });
                    next[(node, e)] = v;
                }
            }
            iterations += 1;
            std::mem::swap(&mut cur, &mut next);
            residual = max_spread(&cur);
            if !residual.is_finite_real() {
                return Err(ConsensusError::NotConverged {
                    iterations,
                    residual: f64::INFINITY,
                });
            }
            if residual < tol {
                break;
            }
        }
    }

    let mut values = DMatrix::<T>::zeros(s_count, e_count);
    for s in 0..s_count {
        values.set_row(s, &cur.row(place[s]));
    }
    Ok(BatchOutcome { values, iterations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome<T: Real> {
    /// Final value at each participant.
    pub values: Vec<T>,
    pub iterations: usize,
}

impl<T: Real> RunOutcome<T> {
    /// Participant 0's converged value; every participant agrees to within
    /// the tolerance.
    pub fn average(&self) -> T {
        self.values[0]
    }
}

/// Scalar average consensus.
pub fn run<T: Real>(
    x0: &[T],
    w: &WeightMatrix<T>,
    tol: f64,
    max_iter: usize,
) -> Result<RunOutcome<T>, ConsensusError> {
    let out = run_batch(
        &DMatrix::from_column_slice(x0.len(), 1, x0),
        w,
        StoppingRule { tol, max_iter, relative: false },
        None,
    )?;
    Ok(RunOutcome {
        values: out.values.column(0).iter().copied().collect(),
        iterations: out.iterations,
    })
}

/// Scalar consensus that also returns every iterate, `trace[t][s] = ξ_s(t)`.
pub fn run_traced<T: Real>(
    x0: &[T],
    w: &WeightMatrix<T>,
    tol: f64,
    max_iter: usize,
) -> Result<(RunOutcome<T>, Vec<Vec<T>>), ConsensusError> {
    check_len(w, x0.len())?;
    check_tol(tol)?;
    let tol_t = T::lit(tol);
    let mut cur = ConsensusVector::new(x0.to_vec());
    let mut trace = vec![cur.values.clone()];
    if cur.spread() >= tol_t {
        loop {
            if cur.iteration >= max_iter {
                return Err(ConsensusError::NotConverged {
                    iterations: cur.iteration,
                    residual: cur.spread().as_f64(),
                });
            }
            cur = step(&cur, w)?;
            trace.push(cur.values.clone());
            if cur.spread() < tol_t {
                break;
            }
        }
    }
    Ok((
        RunOutcome {
            values: cur.values,
            iterations: cur.iteration,
        },
        trace,
    ))
}

/// Writes a trace as CSV `iter,node,value`.
pub fn write_trace_csv<T: Real, W: Write>(trace: &[Vec<T>], out: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["iter", "node", "value"])?;
    for (t, values) in trace.iter().enumerate() {
        for (s, v) in values.iter().enumerate() {
            wtr.write_record([t.to_string(), s.to_string(), v.as_f64().to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Additive shares of each participant's value: `chunks[(l, s)]` is share
/// `l` of participant `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan<T: Real> {
    pub chunks: DMatrix<T>,
}

impl<T: Real> ChunkPlan<T> {
    pub fn chunk_count(&self) -> usize {
        self.chunks.nrows()
    }

    /// Share sums in chunk order; the last share is the residual.
    pub fn column_sums(&self) -> Vec<T> {
        (0..self.chunks.ncols())
            .map(|s| self.chunks.column(s).iter().fold(T::zero(), |a, &b| a + b))
            .collect()
    }
}

/// Splits one value into `c` shares: `c - 1` uniform draws from `[-A, A]`
/// with `A = max(1, |value|)` and a residual share.
fn split_value<T: Real, R: Rng + ?Sized>(value: T, c: usize, rng: &mut R) -> Vec<T> {
    let amp = value.abs().max(T::one()).as_f64();
    let mut shares = Vec::with_capacity(c);
    let mut partial = T::zero();
    for _ in 1..c {
        let r = T::lit(rng.random_range(-amp..=amp));
        partial += r;
        shares.push(r);
    }
    shares.push(value - partial);
    shares
}

pub fn chunk<T: Real>(values: &[T], c: usize, seed: u64) -> Result<ChunkPlan<T>, ConsensusError> {
    if c < 1 {
        return Err(ConsensusError::InvalidChunkCount(c));
    }
    let mut rng = rng_from_seed(seed);
    let mut chunks = DMatrix::<T>::zeros(c, values.len());
    for (s, &v) in values.iter().enumerate() {
        for (l, share) in split_value(v, c, &mut rng).into_iter().enumerate() {
            chunks[(l, s)] = share;
        }
    }
    Ok(ChunkPlan { chunks })
}

/// Options for chunked consensus sessions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkedOptions {
    pub rule: StoppingRule,
    pub chunks: usize,
    /// Draw a fresh participant-to-node placement for every session.
    pub relabel: bool,
}

impl Default for ChunkedOptions {
    fn default() -> Self {
        Self {
            rule: StoppingRule::default(),
            chunks: 3,
            relabel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedOutcome<T: Real> {
    /// `S x E` sum over sessions of what each participant converged to.
    pub values: DMatrix<T>,
    /// Iterations used by each session.
    pub session_iterations: Vec<usize>,
}

impl<T: Real> ChunkedOutcome<T> {
    pub fn total_iterations(&self) -> usize {
        self.session_iterations.iter().sum()
    }
}

/// Chunked batched consensus: every entry of `x0` is split into
/// `opts.chunks` shares and one session runs per share index.
pub fn run_chunked_batch<T: Real>(
    x0: &DMatrix<T>,
    w: &WeightMatrix<T>,
    opts: &ChunkedOptions,
    seed: u64,
    mut log: Option<&mut MessageLog<T>>,
) -> Result<ChunkedOutcome<T>, ConsensusError> {
    if opts.chunks < 1 {
        return Err(ConsensusError::InvalidChunkCount(opts.chunks));
    }
    check_len(w, x0.nrows())?;
    let (s_count, e_count) = x0.shape();
    let c = opts.chunks;

    // Each participant splits its own entries with its own stream.
    let mut sessions = vec![DMatrix::<T>::zeros(s_count, e_count); c];
    for s in 0..s_count {
        let mut rng = rng_from_seed(derive_seed(seed, &[0, s as u64]));
        for e in 0..e_count {
            for (l, share) in split_value(x0[(s, e)], c, &mut rng).into_iter().enumerate() {
                sessions[l][(s, e)] = share;
            }
        }
    }

    let mut values = DMatrix::<T>::zeros(s_count, e_count);
    let mut session_iterations = Vec::with_capacity(c);
    for (l, shares) in sessions.iter().enumerate() {
        let placement = opts
            .relabel
            .then(|| permutation(s_count, derive_seed(seed, &[1, l as u64])));
        let out = run_batch_placed(
            shares,
            w,
            opts.rule,
            placement.as_deref(),
            l,
            log.as_deref_mut(),
        )?;
        values += out.values;
        session_iterations.push(out.iterations);
    }
    Ok(ChunkedOutcome {
        values,
        session_iterations,
    })
}

/// Scalar chunked consensus; returns participant 0's summed average.
pub fn run_chunked<T: Real>(
    x0: &[T],
    w: &WeightMatrix<T>,
    chunks: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<T, ConsensusError> {
    let opts = ChunkedOptions {
        rule: StoppingRule { tol, max_iter, relative: false },
        chunks,
        relabel: false,
    };
    let out = run_chunked_batch(
        &DMatrix::from_column_slice(x0.len(), 1, x0),
        w,
        &opts,
        seed,
        None,
    )?;
    Ok(out.values[(0, 0)])
}

/// How per-participant statistics are summed across the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregator {
    /// Direct column sums handed to every participant. Reference path for
    /// tests; no messages are exchanged.
    Exact,
    /// `S x` chunked dynamical consensus.
    Gossip(ChunkedOptions),
}

/// Network-wide sums as seen by each participant.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSum<T: Real> {
    /// `S x E`; row `s` is participant `s`'s copy of the sums.
    pub per_participant: DMatrix<T>,
    pub iterations: usize,
}

impl Aggregator {
    /// Sums the rows of `local` (participant `s` contributes row `s`).
    pub fn network_sum<T: Real>(
        &self,
        local: &DMatrix<T>,
        w: &WeightMatrix<T>,
        seed: u64,
    ) -> Result<NetworkSum<T>, ConsensusError> {
        check_len(w, local.nrows())?;
        let s_count = local.nrows();
        match self {
            // A lone participant has no neighbors, so there is nothing to
            // exchange and splitting into shares would only add rounding.
            Aggregator::Exact | Aggregator::Gossip(_) if s_count == 1 => Ok(NetworkSum {
                per_participant: local.clone(),
                iterations: 0,
            }),
            Aggregator::Exact => {
                let sums = local.row_sum();
                let mut per_participant = DMatrix::<T>::zeros(s_count, local.ncols());
                for s in 0..s_count {
                    per_participant.set_row(s, &sums);
                }
                Ok(NetworkSum {
                    per_participant,
                    iterations: 0,
                })
            }
            Aggregator::Gossip(opts) => {
                let out = run_chunked_batch(local, w, opts, seed, None)?;
                let iterations = out.total_iterations();
                Ok(NetworkSum {
                    per_participant: out.values * T::from_usize_lossy(s_count),
                    iterations,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::consensus_weights;

    fn w_of(g: &Graph) -> WeightMatrix<f64> {
        consensus_weights(g)
    }

    #[test]
    fn constant_vector_is_fixed_point() {
        let w = w_of(&Graph::cycle_inverse_chord(31).unwrap());
        let x = ConsensusVector::new(vec![2.5; 31]);
        let y = step(&x, &w).unwrap();
        assert!(y.values.iter().all(|&v| (v - 2.5).abs() < 1e-14));
        assert_eq!(y.iteration, 1);
    }

    #[test]
    fn complete_graph_single_step_averages() {
        let w = w_of(&Graph::complete(4).unwrap());
        let y = step(&ConsensusVector::new(vec![0.0, 0.0, 0.0, 4.0]), &w).unwrap();
        for v in y.values {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn path_graph_hand_computed_step() {
        let g = Graph::path(3).unwrap();
        let y = step(&ConsensusVector::new(vec![3.0, 0.0, 0.0]), &w_of(&g)).unwrap();
        let expected = [2.0, 1.0, 0.0];
        for (a, b) in y.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let lap = laplacian_step(&[3.0, 0.0, 0.0], &g).unwrap();
        for (a, b) in lap.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn step_rejects_wrong_length() {
        let w = w_of(&Graph::complete(4).unwrap());
        assert!(matches!(
            step(&ConsensusVector::new(vec![1.0; 3]), &w),
            Err(ConsensusError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn run_on_complete_graph_needs_one_iteration() {
        let w = w_of(&Graph::complete(6).unwrap());
        let x0 = [1.0, -3.0, 8.0, 0.5, 2.0, 7.0];
        let mean = x0.iter().sum::<f64>() / 6.0;
        let out = run(&x0, &w, 1e-9, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.values.iter().all(|v| (v - mean).abs() < 1e-12));
    }

    #[test]
    fn run_at_mean_needs_zero_iterations() {
        let w = w_of(&Graph::cycle(5).unwrap());
        let out = run(&[4.0; 5], &w, 1e-9, 10).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.average(), 4.0);
    }

    #[test]
    fn run_reports_non_convergence() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        let err = run(&[0.0, 0.0, 1.0, 1.0], &w_of(&g), 1e-9, 50).unwrap_err();
        match err {
            ConsensusError::NotConverged {
                iterations,
                residual,
            } => {
                assert_eq!(iterations, 50);
                assert!((residual - 1.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            run(&[0.0; 4], &w_of(&g), 0.0, 5),
            Err(ConsensusError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn single_chunk_is_identity() {
        let plan = chunk(&[1.5, -2.0, 0.0], 1, 4).unwrap();
        assert_eq!(plan.chunk_count(), 1);
        assert_eq!(plan.chunks.row(0).iter().copied().collect::<Vec<_>>(), vec![1.5, -2.0, 0.0]);
        assert_eq!(chunk::<f64>(&[1.0], 0, 1), Err(ConsensusError::InvalidChunkCount(0)));
    }

    #[test]
    fn different_seeds_give_different_chunks() {
        let v = [3.0f64, -1.0, 0.25];
        let a = chunk(&v, 4, 1).unwrap();
        let b = chunk(&v, 4, 2).unwrap();
        assert_ne!(a.chunks, b.chunks);
        for (x, y) in a.column_sums().iter().zip(b.column_sums()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn chunked_matches_unchunked() {
        let w = w_of(&Graph::cycle_inverse_chord(13).unwrap());
        let x0: Vec<f64> = (0..13).map(|i| (i as f64 * 0.7).sin() * 5.0).collect();
        let plain = run(&x0, &w, 1e-11, 100_000).unwrap().average();
        let chunked = run_chunked(&x0, &w, 3, 1e-11, 100_000, 99).unwrap();
        assert!((plain - chunked).abs() < 1e-8);
        let zeros = run_chunked(&[0.0; 13], &w, 5, 1e-11, 100_000, 3).unwrap();
        assert!(zeros.abs() < 5e-11);
    }

    #[test]
    fn relabeled_sessions_return_values_to_owners() {
        let w = w_of(&Graph::cycle_inverse_chord(11).unwrap());
        let x0 = DMatrix::from_fn(11, 2, |s, e| (s * 3 + e) as f64);
        let opts = ChunkedOptions {
            rule: StoppingRule {
                tol: 1e-12,
                max_iter: 100_000,
                relative: false,
            },
            chunks: 3,
            relabel: true,
        };
        let out = run_chunked_batch(&x0, &w, &opts, 5, None).unwrap();
        for e in 0..2 {
            let mean = x0.column(e).mean();
            for s in 0..11 {
                assert!((out.values[(s, e)] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exact_and_gossip_sums_agree() {
        let w = w_of(&Graph::cycle_inverse_chord(7).unwrap());
        let local = DMatrix::from_fn(7, 3, |s, e| ((s + 1) * (e + 2)) as f64 * 0.1);
        let exact = Aggregator::Exact.network_sum(&local, &w, 0).unwrap();
        let gossip = Aggregator::Gossip(ChunkedOptions::default())
            .network_sum(&local, &w, 0)
            .unwrap();
        assert_eq!(exact.iterations, 0);
        assert!(gossip.iterations > 0);
        assert!((exact.per_participant - gossip.per_participant).amax() < 1e-7);
    }

    #[test]
    fn message_log_captures_neighbor_values() {
        let g = Graph::path(3).unwrap();
        let mut log = MessageLog::first_iterations(1);
        run_batch(
            &DMatrix::from_column_slice(3, 1, &[3.0, 0.0, 0.0]),
            &w_of(&g),
            StoppingRule {
                tol: 1e-9,
                max_iter: 10_000,
                relative: false,
            },
            Some(&mut log),
        )
        .unwrap();
        // 2 edges, both directions.
        assert_eq!(log.messages.len(), 4);
        assert!(log
            .messages
            .iter()
            .any(|m| m.from == 0 && m.to == 1 && m.value == 3.0));
    }

    #[test]
    fn trace_csv_has_expected_rows() {
        let w = w_of(&Graph::complete(3).unwrap());
        let (out, trace) = run_traced(&[0.0, 3.0, 6.0], &w, 1e-9, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(trace.len(), 2);
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        assert!(text.starts_with("iter,node,value\n0,0,0\n"));
    }
}
