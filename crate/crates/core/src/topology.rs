//! Peer-to-peer communication graphs and the consensus iteration matrix
//! `W = I - L/S` built from them.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use thiserror::Error;

use crate::rng::{permutation, rng_from_seed};
use crate::scalar::Real;

const SYMMETRY_TOL: f64 = 1e-12;
const CONTRACTION_MARGIN: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("graph size {0} is too small (need S > 2)")]
    TooSmall(usize),
    #[error("{0} is not a prime")]
    NotPrime(usize),
    #[error("edge ({0}, {1}) is invalid for a graph of size {2}")]
    InvalidEdge(usize, usize, usize),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("weight matrix is not symmetric (max |W - W^T| = {0:e})")]
    Asymmetric(f64),
    #[error("permutation of length {got} does not match graph size {expected}")]
    BadPermutation { expected: usize, got: usize },
    #[error("edge list parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected simple graph over participants `0..S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    size: usize,
    adjacency: Vec<bool>,
}

impl Graph {
    /// Graph with `size` nodes and no edges.
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            adjacency: vec![false; size * size],
        }
    }

    pub fn from_edges<I>(size: usize, edges: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut g = Self::empty(size);
        for (u, v) in edges {
            if u >= size || v >= size || u == v {
                return Err(TopologyError::InvalidEdge(u, v, size));
            }
            g.set_edge(u, v);
        }
        Ok(g)
    }

    /// Cycle with inverse chord on `Z_p`: `x ~ x±1` and `x ~ x^{-1}`.
    ///
    /// Node 0 and the self-inverse residues `1` and `p-1` keep only their
    /// cycle edges; a chord that coincides with a cycle edge is not doubled.
    pub fn cycle_inverse_chord(p: usize) -> Result<Self, TopologyError> {
        if p <= 2 {
            return Err(TopologyError::TooSmall(p));
        }
        if !is_prime(p) {
            return Err(TopologyError::NotPrime(p));
        }
        let mut g = Self::empty(p);
        for x in 0..p {
            g.set_edge(x, (x + 1) % p);
            if x != 0 {
                let inv = mod_inverse(x, p);
                if inv != x {
                    g.set_edge(x, inv);
                }
            }
        }
        Ok(g)
    }

    pub fn complete(size: usize) -> Result<Self, TopologyError> {
        if size <= 2 {
            return Err(TopologyError::TooSmall(size));
        }
        let mut g = Self::empty(size);
        for u in 0..size {
            for v in (u + 1)..size {
                g.set_edge(u, v);
            }
        }
        Ok(g)
    }

    pub fn cycle(size: usize) -> Result<Self, TopologyError> {
        if size <= 2 {
            return Err(TopologyError::TooSmall(size));
        }
        let mut g = Self::empty(size);
        for u in 0..size {
            g.set_edge(u, (u + 1) % size);
        }
        Ok(g)
    }

    /// Path `0 - 1 - ... - (S-1)`.
    pub fn path(size: usize) -> Result<Self, TopologyError> {
        if size <= 2 {
            return Err(TopologyError::TooSmall(size));
        }
        Self::from_edges(size, (1..size).map(|v| (v - 1, v)))
    }

    /// Random connected graph: a uniformly shuffled spanning tree plus each
    /// remaining pair independently with probability `extra_edge_prob`.
    pub fn random_connected(
        size: usize,
        extra_edge_prob: f64,
        seed: u64,
    ) -> Result<Self, TopologyError> {
        if size <= 2 {
            return Err(TopologyError::TooSmall(size));
        }
        let mut rng = rng_from_seed(seed);
        let order = permutation(size, rng.random());
        let mut g = Self::empty(size);
        for i in 1..size {
            let parent = order[rng.random_range(0..i)];
            g.set_edge(order[i], parent);
        }
        for u in 0..size {
            for v in (u + 1)..size {
                if !g.has_edge(u, v) && rng.random_bool(extra_edge_prob.clamp(0.0, 1.0)) {
                    g.set_edge(u, v);
                }
            }
        }
        Ok(g)
    }

    /// Erdős–Rényi `G(S, p)`; may be disconnected.
    pub fn erdos_renyi(size: usize, edge_prob: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut g = Self::empty(size);
        for u in 0..size {
            for v in (u + 1)..size {
                if rng.random_bool(edge_prob.clamp(0.0, 1.0)) {
                    g.set_edge(u, v);
                }
            }
        }
        g
    }

    fn set_edge(&mut self, u: usize, v: usize) {
        self.adjacency[u * self.size + v] = true;
        self.adjacency[v * self.size + u] = true;
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u * self.size + v]
    }

    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.size).filter(move |&v| self.has_edge(u, v))
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors(u).count()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.size).map(|u| self.degree(u)).max().unwrap_or(0)
    }

    /// Edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for u in 0..self.size {
            for v in (u + 1)..self.size {
                if self.has_edge(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() <= 1
    }

    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.size];
        let mut components = 0;
        for start in 0..self.size {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        components
    }

    /// Moves node `i` to label `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self, TopologyError> {
        check_permutation(perm, self.size)?;
        let mut g = Self::empty(self.size);
        for (u, v) in self.edges() {
            g.set_edge(perm[u], perm[v]);
        }
        Ok(g)
    }

    /// Relabels with a uniformly random permutation derived from `seed`,
    /// returning the permutation used.
    pub fn random_relabel(&self, seed: u64) -> (Self, Vec<usize>) {
        let perm = permutation(self.size, seed);
        let g = self.relabel(&perm).expect("generated permutation is valid");
        (g, perm)
    }

    /// Edge-list text: first line `S`, then one `u v` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.size).unwrap();
        for (u, v) in self.edges() {
            writeln!(out, "{u} {v}").unwrap();
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            msg: "missing size header".into(),
        })?;
        let size: usize = header.parse().map_err(|e| TopologyError::Parse {
            line,
            msg: format!("bad size: {e}"),
        })?;
        let mut edges = Vec::new();
        for (line, l) in lines {
            let mut it = l.split_whitespace();
            let mut next = |what: &str| -> Result<usize, TopologyError> {
                it.next()
                    .ok_or_else(|| TopologyError::Parse {
                        line,
                        msg: format!("missing {what}"),
                    })?
                    .parse()
                    .map_err(|e| TopologyError::Parse {
                        line,
                        msg: format!("bad {what}: {e}"),
                    })
            };
            let u = next("u")?;
            let v = next("v")?;
            if it.next().is_some() {
                return Err(TopologyError::Parse {
                    line,
                    msg: "trailing tokens".into(),
                });
            }
            edges.push((u, v));
        }
        Self::from_edges(size, edges)
    }
}

fn check_permutation(perm: &[usize], size: usize) -> Result<(), TopologyError> {
    let bad = || TopologyError::BadPermutation {
        expected: size,
        got: perm.len(),
    };
    if perm.len() != size {
        return Err(bad());
    }
    let mut seen = vec![false; size];
    for &p in perm {
        if p >= size || seen[p] {
            return Err(bad());
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Inverse of `x` modulo prime `p` (`x` not divisible by `p`).
fn mod_inverse(x: usize, p: usize) -> usize {
    let (mut r0, mut r1) = (p as i64, (x % p) as i64);
    let (mut t0, mut t1) = (0i64, 1i64);
    while r1 != 0 {
        let q = r0 / r1;
        (r0, r1) = (r1, r0 - q * r1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    t0.rem_euclid(p as i64) as usize
}

/// Consensus iteration matrix together with the sparsity pattern each node
/// is allowed to read from.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix<T: Real> {
    matrix: DMatrix<T>,
    neighbors: Vec<Vec<usize>>,
}

impl<T: Real> WeightMatrix<T> {
    /// `W = I - (D - A)/S`.
    pub fn from_graph(g: &Graph) -> Self {
        let s = g.size();
        let inv_s = T::one() / T::from_usize_lossy(s);
        let mut matrix = DMatrix::<T>::identity(s, s);
        let mut neighbors = Vec::with_capacity(s);
        for u in 0..s {
            let nb: Vec<usize> = g.neighbors(u).collect();
            matrix[(u, u)] = T::one() - T::from_usize_lossy(nb.len()) * inv_s;
            for &v in &nb {
                matrix[(u, v)] = inv_s;
            }
            neighbors.push(nb);
        }
        Self { matrix, neighbors }
    }

    /// Wraps an arbitrary square matrix; neighbors are its nonzero
    /// off-diagonal entries.
    pub fn from_dense(matrix: DMatrix<T>) -> Result<Self, TopologyError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(TopologyError::NotSquare(matrix.nrows(), matrix.ncols()));
        }
        let s = matrix.nrows();
        let neighbors = (0..s)
            .map(|u| {
                (0..s)
                    .filter(|&v| v != u && matrix[(u, v)] != T::zero())
                    .collect()
            })
            .collect();
        Ok(Self { matrix, neighbors })
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn entry(&self, u: usize, v: usize) -> T {
        self.matrix[(u, v)]
    }

    /// Same permutation semantics as [`Graph::relabel`].
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, TopologyError> {
        check_permutation(perm, self.size())?;
        let s = self.size();
        let mut m = DMatrix::<T>::zeros(s, s);
        for u in 0..s {
            for v in 0..s {
                m[(perm[u], perm[v])] = self.matrix[(u, v)];
            }
        }
        Self::from_dense(m)
    }

    pub fn max_asymmetry(&self) -> T {
        let s = self.size();
        let mut worst = T::zero();
        for u in 0..s {
            for v in (u + 1)..s {
                worst = worst.max((self.matrix[(u, v)] - self.matrix[(v, u)]).abs());
            }
        }
        worst
    }
}

impl<T: Real> From<&Graph> for WeightMatrix<T> {
    fn from(g: &Graph) -> Self {
        Self::from_graph(g)
    }
}

/// Builds the consensus weights of a graph.
pub fn consensus_weights<T: Real>(g: &Graph) -> WeightMatrix<T> {
    WeightMatrix::from_graph(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralReport<T: Real> {
    /// Ascending.
    pub eigenvalues: Vec<T>,
    /// `1 - max |λ|` over all eigenvalues but the principal one.
    pub gap: T,
    pub contraction_ok: bool,
}

impl<T: Real> SpectralReport<T> {
    pub fn second_largest_abs(&self) -> T {
        T::one() - self.gap
    }
}

pub fn spectral_gap<T: Real>(w: &WeightMatrix<T>) -> Result<SpectralReport<T>, TopologyError> {
    let asym = w.max_asymmetry();
    if asym > T::lit(SYMMETRY_TOL) {
        return Err(TopologyError::Asymmetric(asym.as_f64()));
    }
    let mut eigenvalues: Vec<T> = SymmetricEigen::new(w.matrix().clone())
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let second = eigenvalues
        .iter()
        .rev()
        .skip(1)
        .map(|l| l.abs())
        .fold(T::zero(), |a, b| a.max(b));
    Ok(SpectralReport {
        eigenvalues,
        gap: T::one() - second,
        contraction_ok: second < T::one() - T::lit(CONTRACTION_MARGIN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_chord_31_is_connected_with_max_degree_three() {
        let g = Graph::cycle_inverse_chord(31).unwrap();
        assert!(g.is_connected());
        assert_eq!(g.max_degree(), 3);
        // Chordless: 0, the self-inverse residues 1 and 30, and the pairs
        // 12*13 = 18*19 = 1 (mod 31) whose chord is already a cycle edge.
        for x in 0..31 {
            let expected = if [0, 1, 12, 13, 18, 19, 30].contains(&x) { 2 } else { 3 };
            assert_eq!(g.degree(x), expected, "node {x}");
        }
    }

    #[test]
    fn inverse_chord_3_is_triangle() {
        let g = Graph::cycle_inverse_chord(3).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn inverse_chord_rejects_bad_sizes() {
        assert_eq!(
            Graph::cycle_inverse_chord(2),
            Err(TopologyError::TooSmall(2))
        );
        assert_eq!(
            Graph::cycle_inverse_chord(33),
            Err(TopologyError::NotPrime(33))
        );
        assert!(Graph::cycle_inverse_chord(1).is_err());
    }

    #[test]
    fn modular_inverse_is_correct() {
        for p in [3usize, 5, 7, 31, 61, 127] {
            for x in 1..p {
                assert_eq!(x * mod_inverse(x, p) % p, 1);
            }
        }
    }

    #[test]
    fn complete_graph_degrees() {
        let g = Graph::complete(3).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                assert_eq!(g.has_edge(u, v), u != v);
            }
        }
        let g4 = Graph::complete(4).unwrap();
        assert!((0..4).all(|u| g4.degree(u) == 3));
        assert!(Graph::complete(2).is_err());
    }

    #[test]
    fn complete_weights_are_uniform() {
        let w: WeightMatrix<f64> = consensus_weights(&Graph::complete(5).unwrap());
        for u in 0..5 {
            for v in 0..5 {
                assert!((w.entry(u, v) - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn triangle_weights_are_one_third() {
        let w: WeightMatrix<f64> = consensus_weights(&Graph::complete(3).unwrap());
        assert!(w.matrix().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn disconnected_graph_fails_contraction() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        let report = spectral_gap(&consensus_weights::<f64>(&g)).unwrap();
        assert!(!report.contraction_ok);
        let ones = report
            .eigenvalues
            .iter()
            .filter(|&&l| (l - 1.0).abs() < 1e-10)
            .count();
        assert_eq!(ones, 2);
    }

    #[test]
    fn edgeless_graph_has_zero_gap() {
        let report = spectral_gap(&consensus_weights::<f64>(&Graph::empty(4))).unwrap();
        assert!(report.gap.abs() < 1e-15);
        assert!(!report.contraction_ok);
    }

    #[test]
    fn complete_graph_gap_is_one() {
        let report = spectral_gap(&consensus_weights::<f64>(&Graph::complete(5).unwrap())).unwrap();
        assert!((report.gap - 1.0).abs() < 1e-12);
        for &l in &report.eigenvalues[..4] {
            assert!(l.abs() < 1e-12);
        }
        assert!(report.contraction_ok);
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.8]);
        let w = WeightMatrix::from_dense(m).unwrap();
        assert!(matches!(spectral_gap(&w), Err(TopologyError::Asymmetric(_))));
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(WeightMatrix::from_dense(rect).is_err());
    }

    #[test]
    fn edge_list_roundtrip_and_errors() {
        let g = Graph::cycle_inverse_chord(7).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("7\n"));
        assert_eq!(Graph::from_edge_list(&text).unwrap(), g);
        assert!(Graph::from_edge_list("").is_err());
        assert!(Graph::from_edge_list("3\n0 3\n").is_err());
        assert!(Graph::from_edge_list("3\n0 1 2\n").is_err());
        assert!(Graph::from_edge_list("3\n1 1\n").is_err());
        assert!(Graph::from_edge_list("x\n").is_err());
    }

    #[test]
    fn relabel_rejects_non_permutations() {
        let g = Graph::cycle(4).unwrap();
        assert!(g.relabel(&[0, 1, 2]).is_err());
        assert!(g.relabel(&[0, 1, 1, 2]).is_err());
        let (h, perm) = g.random_relabel(9);
        for (u, v) in g.edges() {
            assert!(h.has_edge(perm[u], perm[v]));
        }
    }

    #[test]
    fn f32_weights_work() {
        let w: WeightMatrix<f32> = consensus_weights(&Graph::cycle_inverse_chord(13).unwrap());
        let report = spectral_gap(&w).unwrap();
        assert!(report.contraction_ok);
    }
}
