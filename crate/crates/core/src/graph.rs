//! Undirected graphs in CSR form, propagation operators and node homophily.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Immutable undirected graph. Rows of the adjacency are stored with sorted
/// column indices; the base adjacency never contains self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an arbitrary edge list. Duplicate edges and both
    /// orientations collapse into one undirected edge; self-loops are dropped.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_nodes];
        for &(src, dst) in edges {
            if src >= num_nodes || dst >= num_nodes {
                return Err(Error::NodeOutOfRange {
                    src,
                    dst,
                    num_nodes,
                });
            }
            if src != dst {
                adj[src].insert(dst);
                adj[dst].insert(src);
            }
        }
        let mut indptr = Vec::with_capacity(num_nodes + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for row in adj {
            indices.extend(row);
            indptr.push(indices.len());
        }
        Ok(Self {
            num_nodes,
            indptr,
            indices,
        })
    }

    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            indptr: vec![0; num_nodes + 1],
            indices: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.indices.len() / 2
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.indices[self.indptr[node]..self.indptr[node + 1]]
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.indptr[node + 1] - self.indptr[node]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.degree(i)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, in row order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        Self::from_edges(self.num_nodes, &edges)
    }

    /// Reads a tab-separated edge list. Lines starting with `#` and blank
    /// lines are skipped.
    pub fn read_edge_list(path: &Path, num_nodes: usize) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut edges = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message,
            };
            let mut parts = trimmed.split('\t');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(format!("expected `src<TAB>dst`, got {trimmed:?}")));
            };
            let src: usize = a
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad source index {a:?}: {e}")))?;
            let dst: usize = b
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad target index {b:?}: {e}")))?;
            if src >= num_nodes || dst >= num_nodes {
                return Err(parse_err(format!(
                    "edge ({src}, {dst}) references a node outside [0, {num_nodes})"
                )));
            }
            edges.push((src, dst));
        }
        Self::from_edges(num_nodes, &edges)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# {} nodes, {} undirected edges", self.num_nodes, self.num_edges())?;
        for (u, v) in self.edges() {
            writeln!(out, "{u}\t{v}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Which linear filter a [`Propagator`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationKind {
    /// `D⁻¹A`; isolated nodes map to zero rows.
    RowNormalized,
    /// `D̃^{-1/2} Ã D̃^{-1/2}` with `Ã = A + I`.
    SymNormalized,
    /// `I − D̃^{-1/2} Ã D̃^{-1/2}`.
    HighPass,
}

/// A sparse propagation operator materialised from a graph.
#[derive(Clone, Debug)]
pub struct Propagator {
    kind: PropagationKind,
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Propagator {
    pub fn new(graph: &Graph, kind: PropagationKind) -> Self {
        let n = graph.num_nodes();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        let tilde_deg: Vec<f64> = (0..n).map(|i| graph.degree(i) as f64 + 1.0).collect();
        for i in 0..n {
            match kind {
                PropagationKind::RowNormalized => {
                    let deg = graph.degree(i);
                    for &j in graph.neighbors(i) {
                        indices.push(j);
                        values.push(1.0 / deg as f64);
                    }
                }
                PropagationKind::SymNormalized | PropagationKind::HighPass => {
                    let sign = if kind == PropagationKind::HighPass { -1.0 } else { 1.0 };
                    let mut self_done = false;
                    let push_self = |indices: &mut Vec<usize>, values: &mut Vec<f64>| {
                        let w = 1.0 / tilde_deg[i];
                        indices.push(i);
                        values.push(if sign < 0.0 { 1.0 - w } else { w });
                    };
                    for &j in graph.neighbors(i) {
                        if !self_done && j > i {
                            push_self(&mut indices, &mut values);
                            self_done = true;
                        }
                        indices.push(j);
                        values.push(sign / (tilde_deg[i] * tilde_deg[j]).sqrt());
                    }
                    if !self_done {
                        push_self(&mut indices, &mut values);
                    }
                }
            }
            indptr.push(indices.len());
        }
        Self {
            kind,
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn kind(&self) -> PropagationKind {
        self.kind
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Operator entries of row `i` as `(column, weight)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Applies the operator to an `n × d` signal.
    pub fn apply(&self, signal: &Matrix) -> Result<Matrix> {
        if signal.rows() != self.n {
            return Err(Error::DimensionMismatch {
                context: "propagate",
                expected: self.n,
                actual: signal.rows(),
            });
        }
        Ok(self.apply_unchecked(signal))
    }

    pub(crate) fn apply_unchecked(&self, signal: &Matrix) -> Matrix {
        let d = signal.cols();
        let mut out = Matrix::zeros(self.n, d);
        if d == 0 {
            return out;
        }
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, out_row)| {
                for (j, w) in self.row(i) {
                    for (o, s) in out_row.iter_mut().zip(signal.row(j)) {
                        *o += w * s;
                    }
                }
            });
        out
    }

    /// Applies the transposed operator. The symmetric and high-pass filters
    /// are their own transpose.
    pub(crate) fn apply_transpose_unchecked(&self, signal: &Matrix) -> Matrix {
        match self.kind {
            PropagationKind::SymNormalized | PropagationKind::HighPass => {
                self.apply_unchecked(signal)
            }
            PropagationKind::RowNormalized => {
                let d = signal.cols();
                let mut out = Matrix::zeros(self.n, d);
                for i in 0..self.n {
                    let src = signal.row(i);
                    for (j, w) in self.row(i) {
                        for (o, s) in out.row_mut(j).iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, w) in self.row(i) {
                m.set(i, j, m.get(i, j) + w);
            }
        }
        m
    }
}

/// The low- and high-pass operators used by the experts, built once per graph.
#[derive(Clone, Debug)]
pub struct GraphOperators {
    pub low: Propagator,
    pub high: Propagator,
}

impl GraphOperators {
    pub fn new(graph: &Graph) -> Self {
        Self {
            low: Propagator::new(graph, PropagationKind::SymNormalized),
            high: Propagator::new(graph, PropagationKind::HighPass),
        }
    }
}

/// Fraction of `node`'s neighbors that share its label.
pub fn node_homophily(graph: &Graph, labels: &[usize], node: usize) -> Result<f64> {
    let deg = graph.degree(node);
    if deg == 0 {
        return Err(Error::UndefinedHomophily { node });
    }
    let same = graph
        .neighbors(node)
        .iter()
        .filter(|&&u| labels[u] == labels[node])
        .count();
    Ok(same as f64 / deg as f64)
}

/// Per-node homophily; `None` for isolated nodes.
pub fn node_homophily_all(graph: &Graph, labels: &[usize]) -> Vec<Option<f64>> {
    (0..graph.num_nodes())
        .map(|i| node_homophily(graph, labels, i).ok())
        .collect()
}

/// Mean node homophily over nodes with at least one neighbor.
pub fn graph_homophily(graph: &Graph, labels: &[usize]) -> Result<f64> {
    let values: Vec<f64> = node_homophily_all(graph, labels).into_iter().flatten().collect();
    if values.is_empty() {
        return Err(Error::AllNodesIsolated);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
