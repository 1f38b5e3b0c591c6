//! Manifold similarity by diffusion on the neighbor graph.
//!
//! For an anchor `i` the similarity column is the solution of
//! `(I − αÂ) f = (1 − α) e_i`, found with conjugate gradient. The full matrix
//! `(1 − α)(I − αÂ)⁻¹` is dense and is only ever built by [`dense_oracle`]
//! for testing.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rank_order, top_k, NormalizedOperator, OperatorKind};

/// Largest `n` accepted by [`dense_oracle`].
pub const DENSE_ORACLE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub alpha: f64,
    /// Bound on `‖b − Mf‖ / ‖b‖`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            tolerance: 1e-6,
            max_iterations: 100,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("diffusion tolerance must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// The diffusion solution `f*_i` for one anchor: `values[j] = s_m(y_i, y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityColumn {
    pub anchor: usize,
    pub values: Vec<f64>,
    pub residual_norm: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

fn check_inputs(op: &NormalizedOperator, anchor: usize, config: &DiffusionConfig) -> Result<()> {
    config.validate()?;
    if op.kind() != OperatorKind::Symmetric {
        return Err(Error::InvalidParameter(
            "diffusion needs the symmetric normalized operator".into(),
        ));
    }
    if anchor >= op.n() {
        return Err(Error::InvalidParameter(format!(
            "anchor {anchor} out of range (n={})",
            op.n()
        )));
    }
    Ok(())
}

/// Solve for the similarity column of `anchor` by conjugate gradient from the
/// zero vector. When the iteration budget runs out the last iterate (the one
/// with the smallest energy-norm error) is returned with `converged = false`.
pub fn solve_column(
    op: &NormalizedOperator,
    anchor: usize,
    config: &DiffusionConfig,
) -> Result<SimilarityColumn> {
    solve_column_traced(op, anchor, config).map(|(col, _)| col)
}

/// [`solve_column`] that also returns the relative residual after each iteration.
pub fn solve_column_traced(
    op: &NormalizedOperator,
    anchor: usize,
    config: &DiffusionConfig,
) -> Result<(SimilarityColumn, Vec<f64>)> {
    check_inputs(op, anchor, config)?;
    let n = op.n();
    let alpha = config.alpha;
    let scale = 1.0 - alpha;

    if op.row_is_empty(anchor) {
        let mut values = vec![0.0; n];
        values[anchor] = scale;
        let col = SimilarityColumn {
            anchor,
            values,
            residual_norm: 0.0,
            iterations_used: 0,
            converged: true,
        };
        return Ok((col, Vec::new()));
    }

    let b_norm = scale;
    let mut x = vec![0.0; n];
    let mut r = vec![0.0; n];
    r[anchor] = scale;
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs = scale * scale;
    let mut history = Vec::new();
    let mut rel = 1.0;
    let mut converged = false;

    for _ in 0..config.max_iterations {
        // ap = (I − αÂ) p
        op.matvec(&p, &mut ap);
        for (a, &pi) in ap.iter_mut().zip(&p) {
            *a = pi - alpha * *a;
        }
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let step = rs / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        rel = rs_new.sqrt() / b_norm;
        history.push(rel);
        if rel <= config.tolerance {
            converged = true;
            break;
        }
        let beta = rs_new / rs;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
    }

    let col = SimilarityColumn {
        anchor,
        values: x,
        residual_norm: rel,
        iterations_used: history.len(),
        converged,
    };
    Ok((col, history))
}

/// Indices of the `k` largest entries of a similarity vector, descending,
/// ties by ascending index; `exclude` is removed first.
pub fn top_k_of(values: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
    let available = values.len() - usize::from(exclude.is_some());
    if k > available {
        return Err(Error::KTooLarge { k, n: values.len() });
    }
    let scored = values
        .iter()
        .copied()
        .enumerate()
        .filter(|&(j, _)| Some(j) != exclude)
        .collect();
    Ok(top_k(scored, k).into_iter().map(|(j, _)| j).collect())
}

/// Manifold nearest neighbors: the `k` largest entries of the column.
pub fn manifold_knn(column: &SimilarityColumn, k: usize, exclude_self: bool) -> Result<Vec<usize>> {
    top_k_of(&column.values, k, exclude_self.then_some(column.anchor))
}

/// Dense `(1 − α)(I − αÂ)⁻¹` by LU factorization. Test oracle only.
pub fn dense_oracle(op: &NormalizedOperator, alpha: f64) -> Result<Vec<Vec<f64>>> {
    let n = op.n();
    if n > DENSE_ORACLE_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    if op.kind() != OperatorKind::Symmetric {
        return Err(Error::InvalidParameter("dense oracle needs the symmetric operator".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha must be in [0, 1), got {alpha}")));
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for (j, v) in op.row(i) {
            m[(i, j)] -= alpha * v;
        }
    }
    let rhs = DMatrix::<f64>::identity(n, n) * (1.0 - alpha);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidParameter("I − αÂ is singular".into()))?;
    Ok((0..n).map(|i| (0..n).map(|j| sol[(i, j)]).collect()).collect())
}

/// Debug dump: `j value` lines, descending value.
pub fn column_dump(column: &SimilarityColumn) -> String {
    let mut scored: Vec<(usize, f64)> = column.values.iter().copied().enumerate().collect();
    scored.sort_by(rank_order);
    let mut s = String::new();
    for (j, v) in scored {
        let _ = writeln!(s, "{j} {v:.8e}");
    }
    s
}
