//! Reciprocal k-nearest-neighbor graph and its normalized operators.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureSet;

/// `[a·b]₊³` for unit vectors `a`, `b`.
pub fn euclidean_similarity(a: &[f64], b: &[f64]) -> f64 {
    similarity_from_dot(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

#[inline]
pub fn similarity_from_dot(dot: f64) -> f64 {
    let c = dot.max(0.0);
    c * c * c
}

/// Descending similarity, ascending index on ties.
#[inline]
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn require_normalized(features: &FeatureSet) -> Result<()> {
    if !features.is_normalized() {
        return Err(Error::InvalidParameter(
            "features must be l2-normalized before neighbor search".into(),
        ));
    }
    Ok(())
}

/// Keep the `k` best entries under [`rank_order`], sorted.
pub(crate) fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

/// The `k` items most similar to item `query` (itself excluded), with their
/// Euclidean similarity, ranked descending.
pub fn knn_query(features: &FeatureSet, query: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    require_normalized(features)?;
    let n = features.len();
    if query >= n {
        return Err(Error::InvalidParameter(format!("item {query} out of range (n={n})")));
    }
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let scored = (0..n)
        .filter(|&j| j != query)
        .map(|j| (j, similarity_from_dot(features.dot(query, j))))
        .collect();
    Ok(top_k(scored, k))
}

/// Exact brute-force `k`-nearest neighbors of every item.
pub fn knn_search(features: &FeatureSet, k: usize) -> Result<Vec<Vec<usize>>> {
    require_normalized(features)?;
    let n = features.len();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    (0..n)
        .into_par_iter()
        .map(|i| Ok(knn_query(features, i, k)?.into_iter().map(|(j, _)| j).collect()))
        .collect()
}

/// Sparse symmetric adjacency in CSR form, zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    rowptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    degrees: Vec<f64>,
}

impl NeighborGraph {
    /// Build from undirected weighted edges; each edge is given once (either
    /// orientation) and is mirrored. Zero-weight edges are dropped.
    pub fn from_edges(n: usize, k: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!("edge ({i},{j}) out of range (n={n})")));
            }
            if i == j {
                return Err(Error::InvalidParameter(format!("self loop at {i}")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!("edge ({i},{j}) has invalid weight {w}")));
            }
            if w == 0.0 {
                continue;
            }
            rows[i].push((j, w));
            rows[j].push((i, w));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            if row.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::InvalidParameter(format!("duplicate edge at node {i}")));
            }
            if row.len() > k {
                return Err(Error::InvalidParameter(format!(
                    "node {i} has {} edges, more than k={k}",
                    row.len()
                )));
            }
        }
        Ok(Self::from_rows(n, k, rows))
    }

    fn from_rows(n: usize, k: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut rowptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut degrees = Vec::with_capacity(n);
        rowptr.push(0);
        for row in rows {
            degrees.push(row.iter().map(|&(_, w)| w).sum());
            for (j, w) in row {
                cols.push(j);
                vals.push(w);
            }
            rowptr.push(cols.len());
        }
        Self {
            n,
            k,
            rowptr,
            cols,
            vals,
            degrees,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn rowptr(&self) -> &[usize] {
        &self.rowptr
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn vals(&self) -> &[f64] {
        &self.vals
    }

    /// `(neighbor, weight)` pairs of node `i`, ascending neighbor index.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.rowptr[i]..self.rowptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let r = self.rowptr[i]..self.rowptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    /// Undirected edges with `i < j`, row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.neighbors(i).filter(move |&(j, _)| j > i).map(move |(j, w)| (i, j, w)))
            .collect()
    }

    /// Text format: header `MOMG n k`, then `i j w` per edge with `i < j`.
    pub fn to_text(&self) -> String {
        let mut s = format!("MOMG {} {}\n", self.n, self.k);
        for (i, j, w) in self.edges() {
            let _ = writeln!(s, "{i} {j} {w:.8e}");
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or("empty graph file")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 || h[0] != "MOMG" {
            return Err("line 1: expected header `MOMG n k`".into());
        }
        let n: usize = h[1].parse().map_err(|e| format!("line 1: n: {e}"))?;
        let k: usize = h[2].parse().map_err(|e| format!("line 1: k: {e}"))?;
        let mut edges = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(format!("line {}: expected `i j w`", ln + 1));
            }
            let parse_idx = |s: &str| s.parse::<usize>().map_err(|e| format!("line {}: {e}", ln + 1));
            let (i, j) = (parse_idx(f[0])?, parse_idx(f[1])?);
            if i >= j {
                return Err(format!("line {}: edges must satisfy i < j", ln + 1));
            }
            let w: f64 = f[2].parse().map_err(|e| format!("line {}: {e}", ln + 1))?;
            edges.push((i, j, w));
        }
        Self::from_edges(n, k, &edges).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::from(e).at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_text(&text).map_err(|message| Error::Parse {
            path: path.to_owned(),
            message,
        })
    }
}

/// Edge `(i, j)` with weight `s_e(y_i, y_j)` iff each lies in the other's
/// `k` nearest neighbors.
pub fn build_reciprocal_graph(features: &FeatureSet, k: usize) -> Result<NeighborGraph> {
    let lists = knn_search(features, k)?;
    let n = features.len();
    let mut sorted = lists.clone();
    sorted.iter_mut().for_each(|l| l.sort_unstable());
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in sorted[i].iter().filter(|&&j| j > i) {
            if sorted[j].binary_search(&i).is_ok() {
                let w = similarity_from_dot(features.dot(i, j));
                if w > 0.0 {
                    rows[i].push((j, w));
                    rows[j].push((i, w));
                }
            }
        }
    }
    rows.iter_mut().for_each(|r| r.sort_by_key(|&(j, _)| j));
    Ok(NeighborGraph::from_rows(n, k, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// `D^{-1/2} A D^{-1/2}`
    Symmetric,
    /// `D^{-1} A`
    Stochastic,
}

/// A normalized copy of a graph's adjacency sharing its sparsity pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedOperator {
    kind: OperatorKind,
    n: usize,
    rowptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    degrees: Vec<f64>,
}

impl NormalizedOperator {
    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.rowptr[i]..self.rowptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn row_is_empty(&self, i: usize) -> bool {
        self.rowptr[i] == self.rowptr[i + 1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.rowptr[i]..self.rowptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    /// `y = M x`
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let r = self.rowptr[i]..self.rowptr[i + 1];
            *yi = self.cols[r.clone()]
                .iter()
                .zip(&self.vals[r])
                .map(|(&j, &v)| v * x[j])
                .sum();
        }
    }

    /// `y = xᵀ M` (a row vector times the operator).
    pub fn left_matvec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                y[j] += xi * v;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.n]; self.n];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        m
    }
}

/// Normalize a graph. Returns the operator and the number of isolated nodes,
/// whose rows and columns are left empty.
pub fn normalize(graph: &NeighborGraph, kind: OperatorKind) -> (NormalizedOperator, usize) {
    let d = &graph.degrees;
    let isolated = d.iter().filter(|&&x| x == 0.0).count();
    let mut vals = Vec::with_capacity(graph.vals.len());
    for i in 0..graph.n {
        for (j, w) in graph.neighbors(i) {
            vals.push(match kind {
                OperatorKind::Symmetric => w / (d[i] * d[j]).sqrt(),
                OperatorKind::Stochastic => w / d[i],
            });
        }
    }
    let op = NormalizedOperator {
        kind,
        n: graph.n,
        rowptr: graph.rowptr.clone(),
        cols: graph.cols.clone(),
        vals,
        degrees: graph.degrees.clone(),
    };
    (op, isolated)
}
