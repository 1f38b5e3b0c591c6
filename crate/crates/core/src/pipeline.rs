//! End-to-end runs: data → graph → anchors → pools → training → evaluation,
//! optionally alternating re-mining in the learned embedding space.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::anchors::{power_iteration, select_anchors, AnchorSet};
use crate::config::{AnchorMode, DataSource, NegativeSource, PositiveSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::{generate_synthetic, l2_normalize, load_features, pca_whiten_fit, FeatureSet};
use crate::graph::{build_reciprocal_graph, normalize, NeighborGraph, NormalizedOperator, OperatorKind};
use crate::mining::{baseline_pools, mine_anchor, oracle_pools, AnchorPools, OracleMode, TrainingPool};
use crate::trainer::{log_to_csv, train, EmbeddingModel, EpochLog, ModelKind};

/// Raw features as configured: generated or loaded, labels attached when known.
pub fn load_data(config: &RunConfig) -> Result<FeatureSet> {
    match config.data_source {
        DataSource::Synthetic => generate_synthetic(&config.synthetic_spec(), config.seed),
        DataSource::File => {
            let path = config
                .data_path
                .as_deref()
                .ok_or_else(|| Error::InvalidParameter("data.path is unset".into()))?;
            load_features(Path::new(path))
        }
    }
}

/// Optional PCA whitening, then ℓ2 normalization.
pub fn prepare_features(raw: &FeatureSet, config: &RunConfig) -> Result<FeatureSet> {
    let base = if config.whiten {
        let dims = config.whiten_dims.unwrap_or(raw.dim());
        pca_whiten_fit(raw, dims, config.whiten_epsilon)?.apply(raw)?
    } else {
        raw.clone()
    };
    l2_normalize(&base)
}

pub fn build_graph(features: &FeatureSet, config: &RunConfig) -> Result<NeighborGraph> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 items, got {n}")));
    }
    let k = config.graph_k.min(n - 1);
    if k < config.graph_k {
        log::warn!("graph.k = {} clamped to {k} for n = {n}", config.graph_k);
    }
    build_reciprocal_graph(features, k)
}

pub fn choose_anchors(graph: &NeighborGraph, config: &RunConfig) -> Result<AnchorSet> {
    let anchors = match config.anchor_mode {
        AnchorMode::All => AnchorSet::all(graph),
        AnchorMode::Maxima => {
            let (p, _) = normalize(graph, OperatorKind::Stochastic);
            let st = power_iteration(&p, &config.stationary())?;
            select_anchors(graph, &st.pi, config.anchor_count)?
        }
    };
    if anchors.is_empty() {
        return Err(Error::InvalidParameter("no anchors: the graph has no edges".into()));
    }
    Ok(anchors)
}

/// Pools of one anchor with each side taken from its configured source. The
/// negative side never repeats a positive.
pub fn assemble_pools(
    anchor: usize,
    features: &FeatureSet,
    op: &NormalizedOperator,
    labels: Option<&[i64]>,
    config: &RunConfig,
) -> Result<AnchorPools> {
    let mining = config.mining();
    let needs_manifold =
        config.positives == PositiveSource::Manifold || config.negatives == NegativeSource::Manifold;
    let needs_baseline =
        config.positives == PositiveSource::Euclidean || config.negatives == NegativeSource::Random;
    let manifold = match needs_manifold {
        true => Some(mine_anchor(anchor, features, op, &config.diffusion(), &mining)?),
        false => None,
    };
    let baseline = match needs_baseline {
        true => Some(baseline_pools(anchor, features, config.k_base, config.max_neg, config.seed)?),
        false => None,
    };
    let mut out = AnchorPools {
        anchor,
        positives: match config.positives {
            PositiveSource::Manifold => manifold.as_ref().unwrap().positives.clone(),
            PositiveSource::Euclidean => baseline.as_ref().unwrap().positives.clone(),
            PositiveSource::Oracle => Vec::new(),
        },
        negatives: match config.negatives {
            NegativeSource::Manifold => manifold.as_ref().unwrap().negatives.clone(),
            NegativeSource::Random => baseline.as_ref().unwrap().negatives.clone(),
            NegativeSource::Oracle => Vec::new(),
        },
        not_converged: manifold.as_ref().is_some_and(|m| m.not_converged),
    };
    if config.positives == PositiveSource::Oracle {
        out = oracle_pools(&out, features, labels, OracleMode::Positive, &mining)?;
    }
    if config.negatives == NegativeSource::Oracle {
        out = oracle_pools(&out, features, labels, OracleMode::Negative, &mining)?;
    } else {
        let pos: Vec<usize> = out.positives.iter().map(|&(j, _)| j).collect();
        out.negatives.retain(|(j, _)| !pos.contains(j));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MinedRound {
    pub graph: NeighborGraph,
    pub anchors: AnchorSet,
    pub pool: TrainingPool,
}

/// Graph, anchors and pools over `features` (already ℓ2-normalized).
pub fn mine_round(features: &FeatureSet, labels: Option<&[i64]>, config: &RunConfig) -> Result<MinedRound> {
    let graph = build_graph(features, config)?;
    let anchors = choose_anchors(&graph, config)?;
    let (op, _) = normalize(&graph, OperatorKind::Symmetric);
    let pools = anchors
        .anchor_ids
        .par_iter()
        .map(|&a| assemble_pools(a, features, &op, labels, config))
        .collect::<Result<Vec<_>>>()?;
    let pool = TrainingPool::from_pools(pools)?;
    Ok(MinedRound { graph, anchors, pool })
}

/// Identity-initialized linear model when dims allow, seeded random otherwise.
pub fn initial_model(input_dim: usize, config: &RunConfig) -> Result<EmbeddingModel> {
    let out = config.output_dim.unwrap_or(input_dim);
    match config.model {
        ModelKind::Linear if out == input_dim => Ok(EmbeddingModel::identity(input_dim)),
        kind => EmbeddingModel::random(kind, input_dim, out, config.hidden_dim, config.seed),
    }
}

/// Embed every item and wrap the result as a normalized feature set.
pub fn embed_all(model: &EmbeddingModel, features: &FeatureSet) -> Result<FeatureSet> {
    l2_normalize(&FeatureSet::from_embeddings(&model.embed(features, None)?)?)
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub mined: MinedRound,
    pub log: Vec<EpochLog>,
    /// Evaluation after this round, when labels are known.
    pub report: Option<EvalReport>,
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add((round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Round 1 mines on the input features; each later round re-embeds the whole
/// set with the current model, mines again in that space and keeps training.
/// The model always consumes the input features. Epoch numbers continue across
/// rounds; the learning-rate schedule restarts each round.
pub fn alternate_rounds(
    features: &FeatureSet,
    model: &EmbeddingModel,
    config: &RunConfig,
) -> Result<(EmbeddingModel, Vec<RoundOutput>)> {
    if config.rounds == 0 {
        return Err(Error::InvalidParameter("rounds must be >= 1".into()));
    }
    let labels = features.labels();
    let mut model = model.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    for r in 0..config.rounds {
        let mut round_cfg = config.clone();
        round_cfg.seed = round_seed(config.seed, r);
        let mined = if r == 0 {
            mine_round(features, labels, &round_cfg)?
        } else {
            mine_round(&embed_all(&model, features)?, labels, &round_cfg)?
        };
        log::info!(
            "round {}: {} edges, {} anchors, {} pooled items, {} dropped",
            r + 1,
            mined.graph.edge_count(),
            mined.anchors.len(),
            mined.pool.items.len(),
            mined.pool.dropped.len()
        );
        let (next, mut log) = train(features, &mined.pool, &model, &round_cfg.train(), &round_cfg.sampling())?;
        log.iter_mut().for_each(|e| e.epoch += r * config.epochs);
        model = next;
        let report = match labels {
            Some(l) => Some(evaluate(&model.embed(features, None)?, l, &config.eval())?),
            None => None,
        };
        rounds.push(RoundOutput { mined, log, report });
    }
    Ok((model, rounds))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub config: RunConfig,
    pub features: FeatureSet,
    pub model: EmbeddingModel,
    pub rounds: Vec<RoundOutput>,
    /// Evaluation of the prepared input features.
    pub initial_report: Option<EvalReport>,
    pub final_report: Option<EvalReport>,
}

impl PipelineOutput {
    pub fn log(&self) -> Vec<EpochLog> {
        self.rounds.iter().flat_map(|r| r.log.iter().cloned()).collect()
    }

    pub fn final_pool(&self) -> &TrainingPool {
        &self.rounds.last().expect("at least one round").mined.pool
    }
}

pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutput> {
    let config = config.clone().resolved();
    config.validate()?;
    let raw = load_data(&config)?;
    let features = prepare_features(&raw, &config)?;
    let initial_report = match features.labels() {
        Some(l) => Some(evaluate(&features.to_embeddings(), l, &config.eval())?),
        None => None,
    };
    let model = initial_model(features.dim(), &config)?;
    let (model, rounds) = alternate_rounds(&features, &model, &config)?;
    let final_report = rounds.last().and_then(|r| r.report.clone());
    Ok(PipelineOutput {
        config,
        features,
        model,
        rounds,
        initial_report,
        final_report,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::from(e).at(path))
}

/// Write run artifacts into `dir`: resolved config, graph and anchors of the
/// first round, pools of every round, model, training log and reports.
pub fn write_artifacts(out: &PipelineOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    out.config.save(&dir.join("config.json"))?;
    let first = &out.rounds[0].mined;
    first.graph.save(&dir.join("graph.txt"))?;
    write(&dir.join("anchors.txt"), first.anchors.to_text())?;
    for (r, round) in out.rounds.iter().enumerate() {
        if out.rounds.len() > 1 {
            round.mined.pool.save(&dir.join(format!("pools.round{}.jsonl", r + 1)))?;
        }
    }
    out.final_pool().save(&dir.join("pools.jsonl"))?;
    out.model.save(&dir.join("model.bin"))?;
    write(&dir.join("train_log.csv"), log_to_csv(&out.log()))?;
    if let Some(r) = &out.initial_report {
        write(&dir.join("initial_report.json"), r.to_json())?;
    }
    if let Some(r) = &out.final_report {
        write(&dir.join("report.json"), r.to_json())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ManifoldKind;

    fn small() -> RunConfig {
        RunConfig {
            data_kind: ManifoldKind::GaussianClusters,
            data_classes: 3,
            data_per_class: 30,
            data_dim: 6,
            data_noise: 0.05,
            graph_k: 8,
            k_pos: 10,
            k_neg: 20,
            max_neg: 10,
            hard_subset_size: 5,
            anchor_mode: AnchorMode::All,
            epochs: 3,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_runs_and_reports() {
        let out = run_pipeline(&small()).unwrap();
        assert_eq!(out.log().len(), 3);
        let r = out.final_report.unwrap();
        assert!(r.recall(1).unwrap() >= 0.0 && r.nmi <= 1.0);
    }

    #[test]
    fn pool_sources_keep_sides_disjoint() {
        let cfg = small();
        let fs = prepare_features(&load_data(&cfg).unwrap(), &cfg).unwrap();
        let combos = [
            (PositiveSource::Manifold, NegativeSource::Random),
            (PositiveSource::Euclidean, NegativeSource::Manifold),
            (PositiveSource::Oracle, NegativeSource::Manifold),
            (PositiveSource::Manifold, NegativeSource::Oracle),
            (PositiveSource::Oracle, NegativeSource::Oracle),
        ];
        for (p, n) in combos {
            let c = RunConfig { positives: p, negatives: n, ..cfg.clone() };
            let mined = mine_round(&fs, fs.labels(), &c).unwrap();
            for pool in &mined.pool.pools {
                for (j, _) in &pool.negatives {
                    assert!(pool.positives.iter().all(|(i, _)| i != j));
                    assert_ne!(*j, pool.anchor);
                }
            }
        }
    }

    #[test]
    fn two_rounds_remine_in_embedding_space() {
        let cfg = RunConfig { rounds: 2, ..small() };
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.rounds.len(), 2);
        assert_ne!(out.rounds[0].mined.pool.fingerprint(), out.rounds[1].mined.pool.fingerprint());
        assert_eq!(out.log().last().unwrap().epoch, 5);
    }

    #[test]
    fn oracle_without_labels_fails() {
        let cfg = RunConfig { positives: PositiveSource::Oracle, ..small() };
        let fs = prepare_features(&load_data(&cfg).unwrap(), &cfg).unwrap().without_labels();
        assert!(matches!(mine_round(&fs, None, &cfg), Err(Error::LabelsMissing)));
    }
}
