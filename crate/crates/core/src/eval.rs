//! Label-based evaluation: Recall@k, NMI of a k-means clustering, and mAP.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{sq_dist, Embeddings};
use crate::error::{Error, Result};

fn check_labels(emb: &Embeddings, labels: &[i64]) -> Result<()> {
    if emb.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: emb.len(),
            right: labels.len(),
        });
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

/// All other items ordered by squared distance to `q`, ties by index.
fn ranking(emb: &Embeddings, q: usize) -> Vec<usize> {
    let mut others: Vec<(usize, f64)> = (0..emb.len())
        .filter(|&j| j != q)
        .map(|j| (j, emb.sq_dist(q, j)))
        .collect();
    others.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    others.into_iter().map(|(j, _)| j).collect()
}

/// Fraction of queries whose `k` nearest neighbors (self excluded) contain a
/// same-label item, one value per entry of `ks`. Every item is a query; items
/// whose class has no other member always miss.
pub fn recall_at_k(emb: &Embeddings, labels: &[i64], ks: &[usize]) -> Result<Vec<f64>> {
    check_labels(emb, labels)?;
    if ks.contains(&0) {
        return Err(Error::InvalidParameter("recall k must be >= 1".into()));
    }
    // 1-based rank of the first same-label hit per query
    let first_hit: Vec<Option<usize>> = (0..emb.len())
        .into_par_iter()
        .map(|q| ranking(emb, q).iter().position(|&j| labels[j] == labels[q]).map(|p| p + 1))
        .collect();
    let n = emb.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| first_hit.iter().filter(|h| h.is_some_and(|r| r <= k)).count() as f64 / n)
        .collect())
}

/// Non-interpolated average precision of every query with at least one
/// relevant item, averaged.
pub fn mean_average_precision(emb: &Embeddings, labels: &[i64]) -> Result<f64> {
    check_labels(emb, labels)?;
    let aps: Vec<Option<f64>> = (0..emb.len())
        .into_par_iter()
        .map(|q| {
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (pos, j) in ranking(emb, q).into_iter().enumerate() {
                if labels[j] == labels[q] {
                    hits += 1;
                    sum += hits as f64 / (pos + 1) as f64;
                }
            }
            (hits > 0).then(|| sum / hits as f64)
        })
        .collect();
    let scored: Vec<f64> = aps.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiNormalizer {
    /// `(H(a) + H(b)) / 2`
    Arithmetic,
    /// `sqrt(H(a) H(b))`
    Geometric,
}

/// Sum after sorting so the result does not depend on term order.
fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn entropy(counts: &BTreeMap<i64, usize>, n: f64) -> f64 {
    ordered_sum(
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

pub fn nmi(a: &[i64], b: &[i64]) -> Result<f64> {
    nmi_with(a, b, NmiNormalizer::Arithmetic)
}

/// Normalized mutual information of two labelings; 0 when the normalizer is 0.
pub fn nmi_with(a: &[i64], b: &[i64], normalizer: NmiNormalizer) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("nmi needs at least one item".into()));
    }
    let n = a.len() as f64;
    let mut ca = BTreeMap::new();
    let mut cb = BTreeMap::new();
    let mut joint = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_insert(0usize) += 1;
        *cb.entry(y).or_insert(0usize) += 1;
        *joint.entry((x, y)).or_insert(0usize) += 1;
    }
    let mi = ordered_sum(
        joint
            .iter()
            .map(|(&(x, y), &c)| {
                let c = c as f64;
                let outer = ca[&x] as f64 * cb[&y] as f64;
                c / n * (n * c / outer).ln()
            })
            .collect(),
    );
    let (ha, hb) = (entropy(&ca, n), entropy(&cb, n));
    let norm = match normalizer {
        NmiNormalizer::Arithmetic => (ha + hb) / 2.0,
        NmiNormalizer::Geometric => (ha * hb).sqrt(),
    };
    if norm <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / norm).clamp(0.0, 1.0))
}

/// Lloyd's k-means from a seeded farthest-point start: the first center is a
/// seeded uniform pick, each further one the point farthest from the chosen
/// centers. Stops when the assignment is unchanged or after `max_iter` rounds.
pub fn kmeans(emb: &Embeddings, c: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    let n = emb.len();
    if c == 0 || c > n {
        return Err(Error::InvalidParameter(format!("cluster count {c} must be in 1..={n}")));
    }
    let d = emb.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![emb.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), &centers[0])).collect();
    while centers.len() < c {
        let mut far = 0;
        for i in 1..n {
            if nearest[i] > nearest[far] {
                far = i;
            }
        }
        let center = emb.row(far).to_vec();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_dist(emb.row(i), &center));
        }
        centers.push(center);
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, ctr) in centers.iter().enumerate() {
                    let dd = sq_dist(emb.row(i), ctr);
                    if dd < best_d {
                        best = k;
                        best_d = dd;
                    }
                }
                best
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for (i, &k) in labels.iter().enumerate() {
            counts[k] += 1;
            sums[k].iter_mut().zip(emb.row(i)).for_each(|(s, &x)| *s += x);
        }
        for k in 0..c {
            // an emptied cluster keeps its previous center
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub normalizer: NmiNormalizer,
    pub kmeans_max_iter: usize,
    pub with_map: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 4, 8],
            normalizer: NmiNormalizer::Arithmetic,
            kmeans_max_iter: 100,
            with_map: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Keyed by `k` as a decimal string.
    pub recall_at: BTreeMap<String, f64>,
    pub nmi: f64,
    pub map_score: Option<f64>,
    pub n_queries: usize,
    pub clusters: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k.to_string()).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Recall@k for each configured k, NMI of k-means with one cluster per label,
/// and optionally mAP.
pub fn evaluate(emb: &Embeddings, labels: &[i64], config: &EvalConfig) -> Result<EvalReport> {
    let recalls = recall_at_k(emb, labels, &config.ks)?;
    let classes: BTreeSet<i64> = labels.iter().copied().collect();
    let mut remap = BTreeMap::new();
    for (i, l) in classes.iter().enumerate() {
        remap.insert(*l, i as i64);
    }
    let clusters = kmeans(emb, classes.len(), config.seed, config.kmeans_max_iter)?;
    let clusters_i64: Vec<i64> = clusters.iter().map(|&c| c as i64).collect();
    let truth: Vec<i64> = labels.iter().map(|l| remap[l]).collect();
    let map_score = if config.with_map {
        Some(mean_average_precision(emb, labels)?)
    } else {
        None
    };
    Ok(EvalReport {
        recall_at: config.ks.iter().map(|k| k.to_string()).zip(recalls).collect(),
        nmi: nmi_with(&truth, &clusters_i64, config.normalizer)?,
        map_score,
        n_queries: emb.len(),
        clusters: classes.len(),
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[[f64; 2]]) -> Embeddings {
        Embeddings::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn two_items_same_label() {
        // a second class is needed to avoid the degenerate-label error
        let e = emb(&[[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]]);
        assert_eq!(recall_at_k(&e, &[0, 0, 1, 1], &[1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn single_label_is_degenerate() {
        let e = emb(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(recall_at_k(&e, &[3, 3], &[1]), Err(Error::DegenerateLabels)));
        assert!(matches!(mean_average_precision(&e, &[3, 3]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let e = emb(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]);
        let labels = [0, 1, 0, 1, 0];
        let r = recall_at_k(&e, &labels, &[1, 2, 3, 4]).unwrap();
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r[0], 0.0);
        assert_eq!(r[3], 1.0);
    }

    #[test]
    fn ap_examples() {
        // query 0: ranking 1 (label 1), 2 (label 0) → AP = 1/2
        let e = emb(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0]]);
        let labels = [0, 1, 0, 2];
        let map = mean_average_precision(&e, &labels).unwrap();
        // only items 0 and 2 have relevants; item 2 ranks 1 (d=1), 0 (d=4) → AP 1/2
        assert!((map - 0.5).abs() < 1e-15);
        let sep = emb(&[[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]]);
        assert_eq!(mean_average_precision(&sep, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(nmi(&[7, 7], &[1, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        assert!(matches!(nmi(&[0], &[0, 1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn geometric_normalizer() {
        let a = [0, 0, 1, 1, 2, 2];
        let b = [0, 0, 1, 1, 1, 1];
        let ar = nmi_with(&a, &b, NmiNormalizer::Arithmetic).unwrap();
        let ge = nmi_with(&a, &b, NmiNormalizer::Geometric).unwrap();
        // MI = H(b); AM-GM on the entropies means geometric ≥ arithmetic
        assert!(ge >= ar && ge < 1.0);
    }

    #[test]
    fn kmeans_cases() {
        let e = emb(&[[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0], [5.0, 5.1]]);
        let a = kmeans(&e, 2, 3, 100).unwrap();
        assert!(a[0] == a[1] && a[1] == a[2] && a[3] == a[4] && a[4] == a[5] && a[0] != a[3]);
        assert_eq!(a, kmeans(&e, 2, 3, 100).unwrap());
        let all = kmeans(&e, 6, 0, 100).unwrap();
        let distinct: BTreeSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 6);
        assert!(kmeans(&e, 7, 0, 10).is_err());
    }

    #[test]
    fn report_json_shape() {
        let e = emb(&[[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]]);
        let r = evaluate(&e, &[0, 0, 1, 1], &EvalConfig::default()).unwrap();
        assert_eq!(r.recall(1), Some(1.0));
        assert_eq!(r.nmi, 1.0);
        let json = r.to_json();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
