//! Latent graph: adjacency, normalized Laplacian spectra and hop shells.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;

/// Above this size the largest Laplacian eigenvalue is found by power
/// iteration instead of a full symmetric eigensolve.
pub const EIGENSOLVE_MAX_NODES: usize = 512;

/// Undirected, unweighted simple graph stored densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct Graph {
    num_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<bool>,
    degree: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl From<Graph> for GraphRepr {
    fn from(g: Graph) -> Self {
        GraphRepr {
            num_nodes: g.num_nodes,
            edges: g.edges.into_iter().collect(),
        }
    }
}

impl TryFrom<GraphRepr> for Graph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        Graph::new(r.num_nodes, &r.edges)
    }
}

impl Graph {
    /// Builds a graph from an edge list. Edges are unordered; duplicates
    /// (in either orientation) collapse to one.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edges {
            for node in [u, v] {
                if node >= num_nodes {
                    return Err(Error::NodeOutOfRange { node, num_nodes });
                }
            }
            if u == v {
                return Err(Error::SelfLoop(u));
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Self::from_edge_set(num_nodes, set))
    }

    fn from_edge_set(num_nodes: usize, edges: BTreeSet<(usize, usize)>) -> Self {
        let mut adjacency = vec![false; num_nodes * num_nodes];
        let mut degree = vec![0; num_nodes];
        for &(u, v) in &edges {
            adjacency[u * num_nodes + v] = true;
            adjacency[v * num_nodes + u] = true;
            degree[u] += 1;
            degree[v] += 1;
        }
        Self {
            num_nodes,
            edges,
            adjacency,
            degree,
        }
    }

    pub fn ring(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::new(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    /// `rows x cols` 4-neighbour lattice, nodes numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = r * cols + c;
                if c + 1 < cols {
                    edges.push((v, v + 1));
                }
                if r + 1 < rows {
                    edges.push((v, v + cols));
                }
            }
        }
        Self::new(rows * cols, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn is_adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u * self.num_nodes + v]
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_nodes).filter(move |&u| self.is_adjacent(v, u))
    }

    pub fn adjacency_matrix(&self) -> SquareMatrix {
        SquareMatrix::from_fn(self.num_nodes, |i, j| {
            if self.is_adjacent(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::invalid("permutation length differs from node count"));
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::new(self.num_nodes, &edges)
    }

    /// Single-source BFS distances; `usize::MAX` marks unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.num_nodes];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for w in self.neighbors(u) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// All-pairs hop distances, row `v` holding distances from `v`.
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        (0..self.num_nodes).map(|v| self.bfs_distances(v)).collect()
    }

    /// Parses the edge-list text format: a mandatory `nodes N` header, then one
    /// `u v` pair per line with 0-based indices. `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut num_nodes = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx as u64 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            if num_nodes.is_none() {
                if fields.len() != 2 || fields[0] != "nodes" {
                    return Err(parse_err("expected header `nodes N`".into()));
                }
                let n = fields[1]
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("bad node count: {e}")))?;
                num_nodes = Some(n);
                continue;
            }
            if fields.len() != 2 {
                return Err(parse_err(format!("expected `u v`, got `{line}`")));
            }
            let u = fields[0]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad node index: {e}")))?;
            let v = fields[1]
                .parse::<usize>()
                .map_err(|e| parse_err(format!("bad node index: {e}")))?;
            edges.push((u, v));
        }
        let n = num_nodes.ok_or(Error::Parse {
            line: 0,
            message: "missing `nodes N` header".into(),
        })?;
        Self::new(n, &edges)
    }

    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::parse_edge_list(&text)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("nodes {}\n", self.num_nodes);
        for (u, v) in self.edges() {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }
}

/// Normalized Laplacian `L = I - D^{-1/2} A D^{-1/2}` and its rescaling to
/// the Chebyshev domain `2L/lambda_max - I`.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub laplacian: SquareMatrix,
    pub lambda_max: f64,
    pub scaled_laplacian: SquareMatrix,
}

pub fn scaled_laplacian(g: &Graph) -> Result<SpectralData> {
    let n = g.num_nodes();
    if let Some(v) = g.degree().iter().position(|&d| d == 0) {
        return Err(Error::IsolatedNode(v));
    }
    let inv_sqrt: Vec<f64> = g.degree().iter().map(|&d| 1.0 / (d as f64).sqrt()).collect();
    let laplacian = SquareMatrix::from_fn(n, |i, j| {
        let a = if g.is_adjacent(i, j) { 1.0 } else { 0.0 };
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * a * inv_sqrt[j]
    });
    let lambda_max = if n <= EIGENSOLVE_MAX_NODES {
        let eig = nalgebra::SymmetricEigen::new(laplacian.to_nalgebra());
        eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        power_iteration(&laplacian, 1e-10, 100_000)
    };
    let mut scaled = laplacian.scaled(2.0 / lambda_max);
    for i in 0..n {
        scaled.add_at(i, i, -1.0);
    }
    Ok(SpectralData {
        laplacian,
        lambda_max,
        scaled_laplacian: scaled,
    })
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, stopping
/// when the eigen-residual `|Mx - lambda x|` drops below `tol`.
pub fn power_iteration(m: &SquareMatrix, tol: f64, max_iter: usize) -> f64 {
    let n = m.dim();
    // A non-constant start vector avoids being orthogonal to the top
    // eigenvector of regular graphs.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_034).fract()).collect();
    normalize(&mut x);
    let mut lambda = 0.0;
    let mut y = vec![0.0; n];
    for _ in 0..max_iter {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = m.row(i).iter().zip(&x).map(|(a, b)| a * b).sum();
        }
        lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let residual = y
            .iter()
            .zip(&x)
            .map(|(yi, xi)| (yi - lambda * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual < tol {
            break;
        }
        std::mem::swap(&mut x, &mut y);
        normalize(&mut x);
    }
    lambda
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Per-node shells `N_v^{(o)}`: nodes at shortest-path distance exactly `o`.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    num_nodes: usize,
    /// `shells[o][v]` is the sorted shell of order `o` around `v`.
    shells: Vec<Vec<Vec<usize>>>,
}

impl NeighborhoodIndex {
    pub fn max_order(&self) -> usize {
        self.shells.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn shell(&self, order: usize, v: usize) -> &[usize] {
        &self.shells[order][v]
    }

    pub fn shell_sizes(&self, order: usize) -> usize {
        self.shells[order].iter().map(Vec::len).sum()
    }
}

pub fn khop_index(g: &Graph, o_max: usize) -> NeighborhoodIndex {
    let n = g.num_nodes();
    let mut shells = vec![vec![Vec::new(); n]; o_max + 1];
    for v in 0..n {
        for (u, d) in g.bfs_distances(v).into_iter().enumerate() {
            if d <= o_max {
                shells[d][v].push(u);
            }
        }
    }
    NeighborhoodIndex {
        num_nodes: n,
        shells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_graph_degrees() {
        let g = Graph::new(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.degree(), &[1, 2, 1]);
        assert!(g.is_adjacent(1, 0));
        assert!(!g.is_adjacent(0, 2));
    }

    #[test]
    fn ring16_degrees() {
        let g = Graph::ring(16).unwrap();
        assert!(g.degree().iter().all(|&d| d == 2));
        assert_eq!(g.num_edges(), 16);
    }

    #[test]
    fn rejects_self_loop_and_range() {
        assert!(matches!(Graph::new(2, &[(0, 0)]), Err(Error::SelfLoop(0))));
        assert!(matches!(
            Graph::new(2, &[(0, 2)]),
            Err(Error::NodeOutOfRange { node: 2, .. })
        ));
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = Graph::new(3, &[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degree(), &[1, 1, 0]);
    }

    #[test]
    fn two_node_spectrum() {
        let g = Graph::new(2, &[(0, 1)]).unwrap();
        let s = scaled_laplacian(&g).unwrap();
        let expected = SquareMatrix::from_row_major(2, vec![1.0, -1.0, -1.0, 1.0]);
        assert!(s.laplacian.max_abs_diff(&expected) < 1e-14);
        assert!((s.lambda_max - 2.0).abs() < 1e-12);
        let mut shifted = expected.clone();
        shifted.add_at(0, 0, -1.0);
        shifted.add_at(1, 1, -1.0);
        assert!(s.scaled_laplacian.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn complete_graph_k3_spectrum() {
        let g = Graph::new(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let s = scaled_laplacian(&g).unwrap();
        let eig = nalgebra::SymmetricEigen::new(s.laplacian.to_nalgebra());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(f64::total_cmp);
        for (got, want) in vals.iter().zip([0.0, 1.5, 1.5]) {
            assert!((got - want).abs() < 1e-12, "{vals:?}");
        }
        assert!((s.lambda_max - 1.5).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_is_an_error() {
        let g = Graph::new(3, &[(0, 1)]).unwrap();
        assert!(matches!(scaled_laplacian(&g), Err(Error::IsolatedNode(2))));
    }

    #[test]
    fn power_iteration_matches_eigensolve() {
        let g = Graph::lattice(4, 5).unwrap();
        let s = scaled_laplacian(&g).unwrap();
        let approx = power_iteration(&s.laplacian, 1e-10, 100_000);
        assert!((approx - s.lambda_max).abs() < 1e-8, "{approx} vs {}", s.lambda_max);
    }

    #[test]
    fn ring_shells() {
        let g = Graph::ring(16).unwrap();
        let idx = khop_index(&g, 2);
        assert_eq!(idx.shell(0, 0), &[0]);
        assert_eq!(idx.shell(1, 0), &[1, 15]);
        assert_eq!(idx.shell(2, 0), &[2, 14]);
    }

    #[test]
    fn path_shells_and_zero_order() {
        let g = Graph::path(3).unwrap();
        let idx = khop_index(&g, 2);
        assert_eq!(idx.shell(2, 0), &[2]);
        let idx0 = khop_index(&g, 0);
        for v in 0..3 {
            assert_eq!(idx0.shell(0, v), &[v]);
        }
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let text = "# ring\nnodes 4\n0 1\n1 2 # inline\n2 3\n3 0\n";
        let g = Graph::parse_edge_list(text).unwrap();
        assert_eq!(g, Graph::ring(4).unwrap());
        let again = Graph::parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(again, g);
        assert!(matches!(
            Graph::parse_edge_list("0 1\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Graph::parse_edge_list("nodes 3\n0 x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
