//! Run configuration: one flat JSON object with dotted keys, e.g.
//! `{"graph.k": 30, "train.loss": "triplet"}`. Missing keys take defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::StationaryConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, NmiNormalizer};
use crate::features::{ManifoldKind, SyntheticSpec};
use crate::mining::MiningConfig;
use crate::trainer::{LossKind, ModelKind, TrainConfig, TripletForm, WeightNormalization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMode {
    /// Local maxima of the stationary distribution.
    Maxima,
    /// Every non-isolated item.
    All,
}

/// Where one side of the pools comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveSource {
    /// Manifold but not Euclidean neighbors.
    Manifold,
    /// The `k_base` Euclidean nearest neighbors.
    Euclidean,
    /// Same-label items.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    /// Euclidean but not manifold neighbors.
    Manifold,
    /// Uniform draw outside the `k_base` Euclidean neighbors.
    Random,
    /// Hardest different-label items.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "seed")]
    pub seed: u64,
    /// 0 lets the thread pool pick.
    #[serde(rename = "threads")]
    pub threads: usize,

    #[serde(rename = "data.source")]
    pub data_source: DataSource,
    #[serde(rename = "data.path")]
    pub data_path: Option<String>,
    #[serde(rename = "data.kind")]
    pub data_kind: ManifoldKind,
    #[serde(rename = "data.classes")]
    pub data_classes: usize,
    #[serde(rename = "data.per_class")]
    pub data_per_class: usize,
    #[serde(rename = "data.dim")]
    pub data_dim: usize,
    #[serde(rename = "data.noise")]
    pub data_noise: f64,
    #[serde(rename = "data.offset")]
    pub data_offset: f64,

    #[serde(rename = "features.whiten")]
    pub whiten: bool,
    #[serde(rename = "features.whiten_dims")]
    pub whiten_dims: Option<usize>,
    #[serde(rename = "features.whiten_epsilon")]
    pub whiten_epsilon: f64,

    #[serde(rename = "graph.k")]
    pub graph_k: usize,

    #[serde(rename = "diffusion.alpha")]
    pub alpha: f64,
    #[serde(rename = "diffusion.tolerance")]
    pub diffusion_tolerance: f64,
    #[serde(rename = "diffusion.max_iterations")]
    pub diffusion_max_iterations: usize,

    #[serde(rename = "anchors.mode")]
    pub anchor_mode: AnchorMode,
    #[serde(rename = "anchors.count")]
    pub anchor_count: usize,
    #[serde(rename = "anchors.tolerance")]
    pub anchor_tolerance: f64,
    #[serde(rename = "anchors.max_iterations")]
    pub anchor_max_iterations: usize,
    #[serde(rename = "anchors.damping")]
    pub anchor_damping: Option<f64>,

    #[serde(rename = "mining.positives")]
    pub positives: PositiveSource,
    #[serde(rename = "mining.negatives")]
    pub negatives: NegativeSource,
    #[serde(rename = "mining.k_base")]
    pub k_base: usize,
    #[serde(rename = "mining.k_pos")]
    pub k_pos: usize,
    #[serde(rename = "mining.k_neg")]
    pub k_neg: usize,
    #[serde(rename = "mining.max_pos")]
    pub max_pos: Option<usize>,
    #[serde(rename = "mining.max_neg")]
    pub max_neg: usize,
    #[serde(rename = "mining.hard_subset_size")]
    pub hard_subset_size: usize,

    #[serde(rename = "train.model")]
    pub model: ModelKind,
    /// Defaults to the input dimension.
    #[serde(rename = "train.output_dim")]
    pub output_dim: Option<usize>,
    #[serde(rename = "train.hidden_dim")]
    pub hidden_dim: usize,
    #[serde(rename = "train.loss")]
    pub loss: LossKind,
    #[serde(rename = "train.triplet_form")]
    pub triplet_form: TripletForm,
    #[serde(rename = "train.weighted")]
    pub weighted: bool,
    #[serde(rename = "train.weight_normalization")]
    pub weight_normalization: WeightNormalization,
    /// Defaults to 0.5 for triplet and 0.7 for contrastive loss.
    #[serde(rename = "train.margin")]
    pub margin: Option<f64>,
    #[serde(rename = "train.lr0")]
    pub lr0: f64,
    #[serde(rename = "train.lr_decay")]
    pub lr_decay: f64,
    #[serde(rename = "train.lr_step")]
    pub lr_step: usize,
    #[serde(rename = "train.momentum")]
    pub momentum: f64,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.epochs")]
    pub epochs: usize,

    #[serde(rename = "pipeline.rounds")]
    pub rounds: usize,

    #[serde(rename = "eval.ks")]
    pub eval_ks: Vec<usize>,
    #[serde(rename = "eval.nmi_normalizer")]
    pub nmi_normalizer: NmiNormalizer,
    #[serde(rename = "eval.kmeans_max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(rename = "eval.map")]
    pub eval_map: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mining = MiningConfig::default();
        let diffusion = DiffusionConfig::default();
        let stationary = StationaryConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        Self {
            seed: 0,
            threads: 0,
            data_source: DataSource::Synthetic,
            data_path: None,
            data_kind: ManifoldKind::InterleavedMoons,
            data_classes: 2,
            data_per_class: 200,
            data_dim: 16,
            data_noise: 0.05,
            data_offset: 2.0,
            whiten: false,
            whiten_dims: None,
            whiten_epsilon: 1e-6,
            graph_k: 30,
            alpha: diffusion.alpha,
            diffusion_tolerance: diffusion.tolerance,
            diffusion_max_iterations: diffusion.max_iterations,
            anchor_mode: AnchorMode::Maxima,
            anchor_count: 100,
            anchor_tolerance: stationary.tolerance,
            anchor_max_iterations: stationary.max_iterations,
            anchor_damping: stationary.damping,
            positives: PositiveSource::Manifold,
            negatives: NegativeSource::Manifold,
            k_base: 5,
            k_pos: mining.k_pos,
            k_neg: mining.k_neg,
            max_pos: mining.max_pos,
            max_neg: mining.max_neg,
            hard_subset_size: mining.hard_subset_size,
            model: ModelKind::Linear,
            output_dim: None,
            hidden_dim: 64,
            loss: train.loss,
            triplet_form: train.triplet_form,
            weighted: train.weighted,
            weight_normalization: train.weight_normalization,
            margin: None,
            lr0: train.lr0,
            lr_decay: train.lr_decay,
            lr_step: train.lr_step,
            momentum: train.momentum,
            batch_size: train.batch_size,
            epochs: train.epochs,
            rounds: 1,
            eval_ks: eval.ks,
            nmi_normalizer: eval.normalizer,
            kmeans_max_iter: eval.kmeans_max_iter,
            eval_map: eval.with_map,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        Self::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// Fill in derived defaults so the written config fully determines a run.
    pub fn resolved(mut self) -> Self {
        self.margin.get_or_insert(self.loss.default_margin());
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::from(e).at(path))
    }

    /// Euclidean baseline pools: `k_base` nearest neighbors as positives,
    /// random negatives.
    pub fn use_euclidean_baseline(&mut self) {
        self.positives = PositiveSource::Euclidean;
        self.negatives = NegativeSource::Random;
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec::new(self.data_kind, self.data_classes, self.data_per_class, self.data_dim)
            .noise(self.data_noise)
            .offset(self.data_offset)
    }

    pub fn diffusion(&self) -> DiffusionConfig {
        DiffusionConfig {
            alpha: self.alpha,
            tolerance: self.diffusion_tolerance,
            max_iterations: self.diffusion_max_iterations,
        }
    }

    pub fn stationary(&self) -> StationaryConfig {
        StationaryConfig {
            tolerance: self.anchor_tolerance,
            max_iterations: self.anchor_max_iterations,
            damping: self.anchor_damping,
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            k_pos: self.k_pos,
            k_neg: self.k_neg,
            max_pos: self.max_pos,
            max_neg: self.max_neg,
            hard_subset_size: self.hard_subset_size,
        }
    }

    /// Mining config used while sampling tuples. Random negatives carry no
    /// hardness ranking, so the window spans the whole pool.
    pub fn sampling(&self) -> MiningConfig {
        let mut m = self.mining();
        if self.negatives == NegativeSource::Random {
            m.hard_subset_size = m.max_neg;
        }
        m
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            triplet_form: self.triplet_form,
            weighted: self.weighted,
            weight_normalization: self.weight_normalization,
            margin: self.margin.unwrap_or(self.loss.default_margin()),
            lr0: self.lr0,
            lr_decay: self.lr_decay,
            lr_step: self.lr_step,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            ks: self.eval_ks.clone(),
            normalizer: self.nmi_normalizer,
            kmeans_max_iter: self.kmeans_max_iter,
            with_map: self.eval_map,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph_k == 0 {
            return Err(Error::InvalidParameter("graph.k must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidParameter("pipeline.rounds must be >= 1".into()));
        }
        if self.anchor_count == 0 {
            return Err(Error::InvalidParameter("anchors.count must be >= 1".into()));
        }
        if self.k_base == 0 {
            return Err(Error::InvalidParameter("mining.k_base must be >= 1".into()));
        }
        if self.data_source == DataSource::File && self.data_path.is_none() {
            return Err(Error::InvalidParameter("data.source is file but data.path is unset".into()));
        }
        if self.eval_ks.is_empty() {
            return Err(Error::InvalidParameter("eval.ks must not be empty".into()));
        }
        self.diffusion().validate()?;
        self.mining().validate()?;
        self.train().validate()
    }
}
