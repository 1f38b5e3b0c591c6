//! `mom` command line: one subcommand per pipeline stage plus `pipeline`.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::anchors::AnchorSet;
use crate::config::RunConfig;
use crate::diffusion::{column_dump, solve_column, DiffusionConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::features::{save_features, FeatureSet};
use crate::graph::{normalize, NeighborGraph, OperatorKind};
use crate::mining::{sample_epoch_tuples, save_tuples, TrainingPool};
use crate::pipeline::{
    assemble_pools, build_graph, choose_anchors, initial_model, load_data, prepare_features, run_pipeline,
    write_artifacts,
};
use crate::trainer::{log_to_csv, train, EmbeddingModel};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARGO_PKG_NAME"), ")");

#[derive(Parser, Debug)]
#[command(name = "mom", version = BUILD_ID, about = "Hard example mining on data manifolds")]
struct Cli {
    /// JSON config with flat dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then MOM_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any config key, e.g. `--set graph.k=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Euclidean,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the reciprocal kNN graph of a feature file.
    Graph {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Manifold similarity column of one anchor.
    Diffuse {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        anchor: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Select anchors from the graph's stationary distribution.
    Anchors {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Mine positive and negative pools.
    Mine {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Anchor file; computed from the graph when omitted.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one epoch of tuples sampled in the input space.
        #[arg(long)]
        tuples: Option<PathBuf>,
    },
    /// Train an embedding on mined pools.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Starting model; identity-initialized when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate features, or a model applied to them, against labels.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write all artifacts into a directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
            e => Failure::Data(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse `argv` (program name first), run, and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn parse_override(raw: &str) -> CliResult<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("--set {raw}: expected KEY=VALUE")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
    Ok((key.trim().to_owned(), value))
}

/// Config file, then `MOM_SEED` if the file sets no seed, then flags.
fn resolve_config(cli: &Cli, extra: &[(&str, Value)]) -> CliResult<RunConfig> {
    let mut map = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Data(Error::from(e).at(path)))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => {
                    return Err(Failure::Data(Error::Parse {
                        path: path.clone(),
                        message: "expected a JSON object".into(),
                    }))
                }
                Err(e) => {
                    return Err(Failure::Data(Error::Parse {
                        path: path.clone(),
                        message: e.to_string(),
                    }))
                }
            }
        }
        None => Map::new(),
    };
    if !map.contains_key("seed") {
        if let Ok(s) = std::env::var("MOM_SEED") {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("MOM_SEED={s} is not an unsigned integer")))?;
            map.insert("seed".into(), seed.into());
        }
    }
    for raw in &cli.set {
        let (k, v) = parse_override(raw)?;
        map.insert(k, v);
    }
    for (k, v) in extra {
        map.insert((*k).to_owned(), v.clone());
    }
    if let Some(seed) = cli.seed {
        map.insert("seed".into(), seed.into());
    }
    if let Some(t) = cli.threads {
        map.insert("threads".into(), t.into());
    }
    let config: RunConfig = serde_json::from_value(Value::Object(map)).map_err(|e| match &cli.config {
        Some(path) => Failure::Data(Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        }),
        None => Failure::Usage(e.to_string()),
    })?;
    let config = config.resolved();
    config.validate()?;
    Ok(config)
}

fn opt<T: Into<Value>>(key: &'static str, v: Option<T>) -> Option<(&'static str, Value)> {
    v.map(|v| (key, v.into()))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::from(e).at(path))
}

fn prepared(path: &Path, config: &RunConfig) -> Result<FeatureSet> {
    let raw = crate::features::load_features(path)?;
    prepare_features(&raw, config).map_err(|e| e.at(path))
}

fn execute(cli: Cli) -> CliResult<String> {
    let extra: Vec<(&str, Value)> = match &cli.command {
        Command::Graph { k, .. } => opt("graph.k", *k).into_iter().collect(),
        Command::Diffuse { alpha, .. } => opt("diffusion.alpha", *alpha).into_iter().collect(),
        Command::Anchors { count, .. } => opt("anchors.count", *count).into_iter().collect(),
        Command::Train { epochs, .. } => opt("train.epochs", *epochs).into_iter().collect(),
        Command::Pipeline { rounds, .. } => opt("pipeline.rounds", *rounds).into_iter().collect(),
        _ => Vec::new(),
    };
    let mut config = resolve_config(&cli, &extra)?;
    if let Command::Pipeline { baseline: Some(Baseline::Euclidean), .. } = cli.command {
        config.use_euclidean_baseline();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Failure::Usage(format!("--threads: {e}")))?;
    pool.install(|| dispatch(&cli.command, &config)).map_err(Failure::from)
}

fn dispatch(command: &Command, config: &RunConfig) -> Result<String> {
    match command {
        Command::Gen { out } => {
            let fs = load_data(config)?;
            save_features(&fs, out)?;
            config.save(&sidecar(out))?;
            Ok(format!("gen: {} items, dim {} -> {}", fs.len(), fs.dim(), out.display()))
        }
        Command::Graph { features, out, .. } => {
            let fs = prepared(features, config)?;
            let g = build_graph(&fs, config)?;
            g.save(out)?;
            config.save(&sidecar(out))?;
            let isolated = g.degrees().iter().filter(|&&d| d == 0.0).count();
            Ok(format!(
                "graph: n {}, k {}, {} edges, {isolated} isolated -> {}",
                g.n(),
                g.k(),
                g.edge_count(),
                out.display()
            ))
        }
        Command::Diffuse { graph, anchor, out, .. } => {
            let g = NeighborGraph::load(graph)?;
            if *anchor >= g.n() {
                return Err(Error::InvalidParameter(format!("--anchor {anchor} out of range (n={})", g.n())));
            }
            let (op, _) = normalize(&g, OperatorKind::Symmetric);
            let dcfg: DiffusionConfig = config.diffusion();
            let col = solve_column(&op, *anchor, &dcfg)?;
            write(out, column_dump(&col))?;
            config.save(&sidecar(out))?;
            Ok(format!(
                "diffuse: anchor {anchor}, {} iterations, residual {:.3e}{} -> {}",
                col.iterations_used,
                col.residual_norm,
                if col.converged { "" } else { " (not converged)" },
                out.display()
            ))
        }
        Command::Anchors { graph, out, .. } => {
            let g = NeighborGraph::load(graph)?;
            let set = choose_anchors(&g, config)?;
            write(out, set.to_text())?;
            config.save(&sidecar(out))?;
            Ok(format!("anchors: {} of {} requested -> {}", set.len(), set.requested, out.display()))
        }
        Command::Mine {
            features,
            graph,
            anchors,
            out,
            tuples,
        } => {
            let fs = prepared(features, config)?;
            let g = NeighborGraph::load(graph)?;
            if g.n() != fs.len() {
                return Err(Error::DimMismatch {
                    expected: fs.len(),
                    found: g.n(),
                }
                .at(graph));
            }
            let set = match anchors {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
                    let set = AnchorSet::from_text(&text).map_err(|message| Error::Parse {
                        path: path.clone(),
                        message,
                    })?;
                    if let Some(&bad) = set.anchor_ids.iter().find(|&&a| a >= fs.len()) {
                        return Err(Error::Parse {
                            path: path.clone(),
                            message: format!("anchor {bad} out of range (n={})", fs.len()),
                        });
                    }
                    set
                }
                None => choose_anchors(&g, config)?,
            };
            let (op, _) = normalize(&g, OperatorKind::Symmetric);
            let pools = set
                .anchor_ids
                .iter()
                .map(|&a| assemble_pools(a, &fs, &op, fs.labels(), config))
                .collect::<Result<Vec<_>>>()?;
            let pool = TrainingPool::from_pools(pools)?;
            pool.save(out)?;
            if let Some(tp) = tuples {
                let sample = sample_epoch_tuples(&pool.pools, &fs.to_embeddings(), &config.sampling(), config.seed)?;
                save_tuples(&sample.tuples, tp)?;
            }
            config.save(&sidecar(out))?;
            Ok(format!(
                "mine: {} anchors kept, {} dropped, {} pooled items -> {}",
                pool.pools.len(),
                pool.dropped.len(),
                pool.items.len(),
                out.display()
            ))
        }
        Command::Train {
            features,
            pools,
            out,
            init,
            log,
            ..
        } => {
            let fs = prepared(features, config)?;
            let pool = TrainingPool::load(pools)?;
            if let Some(&bad) = pool.items.iter().find(|&&i| i >= fs.len()) {
                return Err(Error::Parse {
                    path: pools.clone(),
                    message: format!("item {bad} out of range (n={})", fs.len()),
                });
            }
            let model = match init {
                Some(p) => EmbeddingModel::load(p)?,
                None => initial_model(fs.dim(), config)?,
            };
            let (model, epochs) = train(&fs, &pool, &model, &config.train(), &config.sampling())?;
            model.save(out)?;
            if let Some(lp) = log {
                write(lp, log_to_csv(&epochs))?;
            }
            config.save(&sidecar(out))?;
            let last = epochs.last().map_or(0.0, |e| e.mean_loss);
            Ok(format!("train: {} epochs, final mean loss {last:.6} -> {}", epochs.len(), out.display()))
        }
        Command::Eval { features, model, out } => {
            let fs = prepared(features, config)?;
            let labels = fs.labels().ok_or(Error::LabelsMissing).map_err(|e| e.at(features))?;
            let emb = match model {
                Some(p) => EmbeddingModel::load(p)?.embed(&fs, None)?,
                None => fs.to_embeddings(),
            };
            let report = evaluate(&emb, labels, &config.eval())?;
            write(out, report.to_json())?;
            config.save(&sidecar(out))?;
            let r1 = report.recall(config.eval_ks[0]).unwrap_or(0.0);
            Ok(format!(
                "eval: recall@{} {r1:.4}, nmi {:.4} -> {}",
                config.eval_ks[0],
                report.nmi,
                out.display()
            ))
        }
        Command::Pipeline { out, .. } => {
            let result = run_pipeline(config)?;
            write_artifacts(&result, out)?;
            let r1 = |r: &Option<crate::eval::EvalReport>| {
                r.as_ref().and_then(|r| r.recall(1)).map_or("n/a".into(), |v| format!("{v:.4}"))
            };
            Ok(format!(
                "pipeline: {} rounds, recall@1 {} -> {} -> {}",
                result.rounds.len(),
                r1(&result.initial_report),
                r1(&result.final_report),
                out.display()
            ))
        }
    }
}
