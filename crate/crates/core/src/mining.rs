//! Training-example mining from disagreements between Euclidean and
//! manifold neighbors.
//!
//! For an anchor `r` with Euclidean neighbors `E_k` and manifold neighbors
//! `M_k`:
//!
//! * positives are `M_k \ E_k` (matching items the features underrate),
//!   ordered by descending manifold similarity;
//! * negatives are `E_k \ M_k` (non-matching items the features overrate),
//!   ordered by descending Euclidean similarity and capped at `max_neg`.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{solve_column, DiffusionConfig};
use crate::embeddings::Embeddings;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::graph::{knn_query, rank_order, similarity_from_dot, top_k, NormalizedOperator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Neighbor count for the positive-pool set difference.
    pub k_pos: usize,
    /// Neighbor count for the negative-pool set difference.
    pub k_neg: usize,
    pub max_pos: Option<usize>,
    pub max_neg: usize,
    /// Per-epoch window of hardest negatives to draw from.
    pub hard_subset_size: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            k_pos: 50,
            k_neg: 100,
            max_pos: None,
            max_neg: 50,
            hard_subset_size: 10,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_pos == 0 || self.k_neg == 0 || self.max_neg == 0 {
            return Err(Error::InvalidParameter(
                "k_pos, k_neg and max_neg must be >= 1".into(),
            ));
        }
        if self.max_pos == Some(0) {
            return Err(Error::InvalidParameter("max_pos must be >= 1 when set".into()));
        }
        if self.hard_subset_size == 0 || self.hard_subset_size > self.max_neg {
            return Err(Error::InvalidParameter(format!(
                "hard_subset_size must be in 1..={} (got {})",
                self.max_neg, self.hard_subset_size
            )));
        }
        Ok(())
    }
}

/// Positive and negative pools of one anchor. Weights are manifold
/// similarity for positives and Euclidean similarity for negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPools {
    pub anchor: usize,
    pub positives: Vec<(usize, f64)>,
    pub negatives: Vec<(usize, f64)>,
    /// The diffusion solve behind these pools hit its iteration budget.
    #[serde(default, skip_serializing)]
    pub not_converged: bool,
}

impl AnchorPools {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }

    pub fn max_positive_weight(&self) -> f64 {
        self.positives.first().map_or(0.0, |&(_, w)| w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    #[serde(rename = "r")]
    pub anchor: usize,
    #[serde(rename = "p")]
    pub positive: usize,
    #[serde(rename = "n")]
    pub negative: usize,
    /// Manifold similarity of the positive to the anchor.
    #[serde(rename = "w")]
    pub weight: f64,
}

fn euclidean_ranking(features: &FeatureSet, anchor: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    knn_query(features, anchor, k.min(features.len() - 1))
}

/// Top-`k` manifold neighbors, self excluded. Items with zero manifold
/// similarity are unreachable from the anchor and never count as neighbors.
fn manifold_ranking(column: &[f64], anchor: usize, k: usize) -> Vec<(usize, f64)> {
    let scored = column
        .iter()
        .copied()
        .enumerate()
        .filter(|&(j, v)| j != anchor && v > 0.0)
        .collect();
    top_k(scored, k)
}

fn positives_from(
    features: &FeatureSet,
    anchor: usize,
    column: &[f64],
    config: &MiningConfig,
) -> Result<Vec<(usize, f64)>> {
    let euclid: HashSet<usize> = euclidean_ranking(features, anchor, config.k_pos)?
        .into_iter()
        .map(|(j, _)| j)
        .collect();
    let mut out: Vec<(usize, f64)> = manifold_ranking(column, anchor, config.k_pos)
        .into_iter()
        .filter(|(j, _)| !euclid.contains(j))
        .collect();
    if let Some(m) = config.max_pos {
        out.truncate(m);
    }
    Ok(out)
}

fn negatives_from(
    features: &FeatureSet,
    anchor: usize,
    column: &[f64],
    config: &MiningConfig,
) -> Result<Vec<(usize, f64)>> {
    let manifold: HashSet<usize> = manifold_ranking(column, anchor, config.k_neg)
        .into_iter()
        .map(|(j, _)| j)
        .collect();
    let mut out: Vec<(usize, f64)> = euclidean_ranking(features, anchor, config.k_neg)?
        .into_iter()
        .filter(|(j, _)| !manifold.contains(j))
        .collect();
    out.truncate(config.max_neg);
    Ok(out)
}

/// Pools of `anchor` given its similarity column, from whatever route it was
/// computed (conjugate gradient or the dense oracle).
pub fn pools_from_column(
    anchor: usize,
    features: &FeatureSet,
    column: &[f64],
    config: &MiningConfig,
) -> Result<AnchorPools> {
    config.validate()?;
    if column.len() != features.len() {
        return Err(Error::LengthMismatch {
            left: column.len(),
            right: features.len(),
        });
    }
    Ok(AnchorPools {
        anchor,
        positives: positives_from(features, anchor, column, config)?,
        negatives: negatives_from(features, anchor, column, config)?,
        not_converged: false,
    })
}

/// Both pools of one anchor from a single diffusion solve.
pub fn mine_anchor(
    anchor: usize,
    features: &FeatureSet,
    op: &NormalizedOperator,
    diffusion: &DiffusionConfig,
    config: &MiningConfig,
) -> Result<AnchorPools> {
    let column = solve_column(op, anchor, diffusion)?;
    if !column.converged {
        log::warn!(
            "anchor {anchor}: diffusion stopped at residual {:.3e} after {} iterations",
            column.residual_norm,
            column.iterations_used
        );
    }
    let mut pools = pools_from_column(anchor, features, &column.values, config)?;
    pools.not_converged = !column.converged;
    Ok(pools)
}

pub fn positive_pool(
    anchor: usize,
    features: &FeatureSet,
    op: &NormalizedOperator,
    diffusion: &DiffusionConfig,
    config: &MiningConfig,
) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    let column = solve_column(op, anchor, diffusion)?;
    positives_from(features, anchor, &column.values, config)
}

pub fn negative_pool(
    anchor: usize,
    features: &FeatureSet,
    op: &NormalizedOperator,
    diffusion: &DiffusionConfig,
    config: &MiningConfig,
) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    let column = solve_column(op, anchor, diffusion)?;
    negatives_from(features, anchor, &column.values, config)
}

/// Euclidean baseline: the `k_base` nearest neighbors are positives and a
/// seeded uniform draw of `max_neg` other items are negatives. Weights are
/// Euclidean similarities.
pub fn baseline_pools(
    anchor: usize,
    features: &FeatureSet,
    k_base: usize,
    max_neg: usize,
    seed: u64,
) -> Result<AnchorPools> {
    if k_base == 0 {
        return Err(Error::InvalidParameter("k_base must be >= 1".into()));
    }
    let positives = knn_query(features, anchor, k_base)?;
    let mut excluded: Vec<bool> = vec![false; features.len()];
    excluded[anchor] = true;
    positives.iter().for_each(|&(j, _)| excluded[j] = true);
    let rest: Vec<usize> = (0..features.len()).filter(|&j| !excluded[j]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(anchor as u64);
    let amount = max_neg.min(rest.len());
    let mut negatives: Vec<(usize, f64)> = sample(&mut rng, rest.len(), amount)
        .into_iter()
        .map(|p| {
            let j = rest[p];
            (j, similarity_from_dot(features.dot(anchor, j)))
        })
        .collect();
    negatives.sort_by(rank_order);
    Ok(AnchorPools {
        anchor,
        positives,
        negatives,
        not_converged: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    Positive,
    Negative,
}

/// Replace one pool with label ground truth: every same-label item as a
/// positive (weight 1), or the hardest different-label items by Euclidean
/// similarity as negatives. Items of the untouched pool are kept out of the
/// replaced one so the pools stay disjoint.
pub fn oracle_pools(
    base: &AnchorPools,
    features: &FeatureSet,
    labels: Option<&[i64]>,
    mode: OracleMode,
    config: &MiningConfig,
) -> Result<AnchorPools> {
    let labels = labels.ok_or(Error::LabelsMissing)?;
    if labels.len() != features.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: features.len(),
        });
    }
    let r = base.anchor;
    let mut out = base.clone();
    let scored = |keep: &dyn Fn(usize) -> bool| -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = (0..features.len())
            .filter(|&j| j != r && keep(j))
            .map(|j| (j, similarity_from_dot(features.dot(r, j))))
            .collect();
        v.sort_by(rank_order);
        v
    };
    match mode {
        OracleMode::Positive => {
            let other: HashSet<usize> = base.negatives.iter().map(|&(j, _)| j).collect();
            let mut pos: Vec<(usize, f64)> = scored(&|j| labels[j] == labels[r] && !other.contains(&j))
                .into_iter()
                .map(|(j, _)| (j, 1.0))
                .collect();
            if let Some(m) = config.max_pos {
                pos.truncate(m);
            }
            out.positives = pos;
        }
        OracleMode::Negative => {
            let other: HashSet<usize> = base.positives.iter().map(|&(j, _)| j).collect();
            let mut neg = scored(&|j| labels[j] != labels[r] && !other.contains(&j));
            neg.truncate(config.max_neg);
            out.negatives = neg;
        }
    }
    Ok(out)
}

/// Pools of every surviving anchor plus the union of all pooled items.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPool {
    pub pools: Vec<AnchorPools>,
    /// Anchors and pool members, ascending.
    pub items: Vec<usize>,
    /// Anchors dropped because both pools were empty.
    pub dropped: Vec<usize>,
}

impl TrainingPool {
    /// Drop anchors with two empty pools and collect the item union.
    pub fn from_pools(pools: Vec<AnchorPools>) -> Result<Self> {
        let (pools, empty): (Vec<_>, Vec<_>) = pools.into_iter().partition(|p| !p.is_empty());
        let dropped: Vec<usize> = empty.iter().map(|p| p.anchor).collect();
        if !dropped.is_empty() {
            log::warn!("{} anchors dropped with empty pools", dropped.len());
        }
        if pools.is_empty() {
            return Err(Error::AllPoolsEmpty);
        }
        let mut items = BTreeSet::new();
        for p in &pools {
            items.insert(p.anchor);
            items.extend(p.positives.iter().map(|&(j, _)| j));
            items.extend(p.negatives.iter().map(|&(j, _)| j));
        }
        Ok(Self {
            pools,
            items: items.into_iter().collect(),
            dropped,
        })
    }

    /// Stable digest of pool membership and weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.pools {
            p.anchor.hash(&mut h);
            for &(j, w) in p.positives.iter().chain(&p.negatives) {
                j.hash(&mut h);
                w.to_bits().hash(&mut h);
            }
            u64::MAX.hash(&mut h);
        }
        h.finish()
    }

    /// JSON lines, one object per anchor, weights with 9 significant digits.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.pools {
            let round = |v: &[(usize, f64)]| -> Vec<(usize, f64)> {
                v.iter().map(|&(j, w)| (j, sig9(w))).collect()
            };
            let line = PoolLine {
                anchor: p.anchor,
                positives: round(&p.positives),
                negatives: round(&p.negatives),
            };
            s.push_str(&serde_json::to_string(&line).expect("pool line serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, String> {
        let mut pools = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: AnchorPools =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", ln + 1))?;
            pools.push(p);
        }
        Self::from_pools(pools).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::from(e).at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_jsonl(&text).map_err(|message| Error::Parse {
            path: path.to_owned(),
            message,
        })
    }
}

#[derive(Serialize)]
struct PoolLine {
    anchor: usize,
    positives: Vec<(usize, f64)>,
    negatives: Vec<(usize, f64)>,
}

/// Round to 9 significant decimal digits.
pub(crate) fn sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Mine pools for every anchor. Anchors are independent and solved in parallel;
/// output order follows `anchors`.
pub fn build_training_pool(
    anchors: &[usize],
    features: &FeatureSet,
    op: &NormalizedOperator,
    diffusion: &DiffusionConfig,
    config: &MiningConfig,
) -> Result<TrainingPool> {
    config.validate()?;
    diffusion.validate()?;
    if anchors.is_empty() {
        return Err(Error::InvalidParameter("anchor set is empty".into()));
    }
    let pools = anchors
        .par_iter()
        .map(|&a| mine_anchor(a, features, op, diffusion, config))
        .collect::<Result<Vec<_>>>()?;
    TrainingPool::from_pools(pools)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSample {
    pub tuples: Vec<TrainingTuple>,
    /// Anchors skipped because one of their pools is empty.
    pub skipped: usize,
}

/// One tuple per anchor: a uniform positive, and a negative drawn uniformly
/// from the `hard_subset_size` pool members closest to the anchor in the
/// current embedding space. `embeddings` is indexed by item id.
pub fn sample_epoch_tuples(
    pools: &[AnchorPools],
    embeddings: &Embeddings,
    config: &MiningConfig,
    seed: u64,
) -> Result<EpochSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples = Vec::with_capacity(pools.len());
    let mut skipped = 0;
    for p in pools {
        if p.positives.is_empty() || p.negatives.is_empty() {
            skipped += 1;
            continue;
        }
        let (positive, weight) = p.positives[rng.random_range(0..p.positives.len())];
        let mut window: Vec<(usize, f64)> = p
            .negatives
            .iter()
            .map(|&(j, _)| (j, embeddings.sq_dist(p.anchor, j)))
            .collect();
        // nearest first; stable sort keeps pool order on ties
        window.sort_by(|a, b| a.1.total_cmp(&b.1));
        window.truncate(config.hard_subset_size);
        let (negative, _) = window[rng.random_range(0..window.len())];
        tuples.push(TrainingTuple {
            anchor: p.anchor,
            positive,
            negative,
            weight,
        });
    }
    Ok(EpochSample { tuples, skipped })
}

pub fn tuples_to_jsonl(tuples: &[TrainingTuple]) -> String {
    let mut s = String::new();
    for t in tuples {
        let rounded = TrainingTuple {
            weight: sig9(t.weight),
            ..*t
        };
        s.push_str(&serde_json::to_string(&rounded).expect("tuple serializes"));
        s.push('\n');
    }
    s
}

pub fn save_tuples(tuples: &[TrainingTuple], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
    f.write_all(tuples_to_jsonl(tuples).as_bytes())?;
    Ok(())
}
