//! Anchor selection: modes of the stationary distribution of the graph
//! random walk.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NeighborGraph, NormalizedOperator, OperatorKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryConfig {
    /// Stop once the L1 change between iterates is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// `Some(β)` iterates `π ← βπP + (1−β)u`. Off by default; when enabled
    /// the result no longer equals the degree distribution.
    pub damping: Option<f64>,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            damping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub pi: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub l1_delta: f64,
}

/// Left power iteration `π ← πP` from the uniform distribution, renormalized
/// to unit mass after every step.
pub fn power_iteration(
    op: &NormalizedOperator,
    config: &StationaryConfig,
) -> Result<StationaryDistribution> {
    if op.kind() != OperatorKind::Stochastic {
        return Err(Error::InvalidParameter(
            "power iteration needs the stochastic operator".into(),
        ));
    }
    let n = op.n();
    let active: Vec<bool> = (0..n).map(|i| !op.row_is_empty(i)).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    if n_active == 0 {
        return Err(Error::InvalidParameter("graph has no edges".into()));
    }
    if let Some(b) = config.damping {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::InvalidParameter(format!("damping must be in [0, 1], got {b}")));
        }
    }

    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut delta = f64::INFINITY;
    for it in 1..=config.max_iterations {
        op.left_matvec(&pi, &mut next);
        if let Some(beta) = config.damping {
            let teleport = (1.0 - beta) / n_active as f64;
            for (v, &a) in next.iter_mut().zip(&active) {
                *v = beta * *v + if a { teleport } else { 0.0 };
            }
        }
        let mass: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= mass);
        delta = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if delta <= config.tolerance {
            return Ok(StationaryDistribution {
                pi,
                iterations_used: it,
                converged: true,
                l1_delta: delta,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: config.max_iterations,
        delta,
    })
}

/// Nodes where `π` peaks over the graph neighborhood. A connected plateau of
/// equal values none of whose members has a strictly larger neighbor counts
/// as one maximum, represented by its smallest index. Isolated nodes are
/// never maxima. Ascending index order.
pub fn local_maxima(graph: &NeighborGraph, pi: &[f64]) -> Result<Vec<usize>> {
    let n = graph.n();
    if pi.len() != n {
        return Err(Error::LengthMismatch {
            left: pi.len(),
            right: n,
        });
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] || graph.degrees()[start] == 0.0 {
            continue;
        }
        // flood the equal-valued plateau containing `start`
        seen[start] = true;
        queue.push_back(start);
        let mut dominated = false;
        while let Some(u) = queue.pop_front() {
            for (v, _) in graph.neighbors(u) {
                if pi[v] > pi[u] {
                    dominated = true;
                } else if pi[v] == pi[u] && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if !dominated {
            out.push(start);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchor_ids: Vec<usize>,
    pub pi_values: Vec<f64>,
    /// How many anchors were asked for; may exceed `anchor_ids.len()`.
    pub requested: usize,
}

impl AnchorSet {
    /// Every non-isolated node as an anchor, ascending index.
    pub fn all(graph: &NeighborGraph) -> Self {
        let anchor_ids: Vec<usize> = (0..graph.n()).filter(|&i| graph.degrees()[i] > 0.0).collect();
        Self {
            pi_values: vec![0.0; anchor_ids.len()],
            requested: graph.n(),
            anchor_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.anchor_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_ids.is_empty()
    }

    /// `id pi` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (id, p) in self.anchor_ids.iter().zip(&self.pi_values) {
            let _ = writeln!(s, "{id} {p:.8e}");
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut anchor_ids = Vec::new();
        let mut pi_values = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let id = it
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or(format!("line {}: bad id", ln + 1))?;
            let p = it
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or(format!("line {}: bad probability", ln + 1))?;
            anchor_ids.push(id);
            pi_values.push(p);
        }
        Ok(Self {
            requested: anchor_ids.len(),
            anchor_ids,
            pi_values,
        })
    }
}

/// The `count` local maxima with largest `π`, descending, ties by index.
pub fn select_anchors(graph: &NeighborGraph, pi: &[f64], count: usize) -> Result<AnchorSet> {
    if count == 0 {
        return Err(Error::InvalidParameter("anchor count must be >= 1".into()));
    }
    let mut maxima = local_maxima(graph, pi)?;
    maxima.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    maxima.truncate(count);
    if maxima.len() < count {
        log::warn!("only {} local maxima available, {count} anchors requested", maxima.len());
    }
    Ok(AnchorSet {
        pi_values: maxima.iter().map(|&i| pi[i]).collect(),
        anchor_ids: maxima,
        requested: count,
    })
}
