//! Run configuration: TOML on disk, every field range-checked on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, GraphMode, RolloutOptions};
use crate::error::{Error, Result};
use crate::index::IndexConfig;
use crate::learn::{AdamConfig, DecayMode, LossWeights, TrainConfig};
use crate::model::ModelShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexSection {
    pub window: usize,
    pub rebuild_every: usize,
    pub items_per_leaf: usize,
    pub fanout: usize,
    pub beam: usize,
    pub lloyd_iters: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        let d = IndexConfig::default();
        IndexSection {
            window: d.window,
            rebuild_every: d.rebuild_every,
            items_per_leaf: d.items_per_leaf,
            fanout: d.fanout,
            beam: d.beam,
            lloyd_iters: d.lloyd_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSection {
    pub tau: f64,
    pub lambda_init: [f64; 3],
}

impl Default for AttentionSection {
    fn default() -> Self {
        AttentionSection {
            tau: crate::attention::DEFAULT_TAU,
            lambda_init: crate::attention::LAMBDA_GT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimSection {
            lr_stage1: 1e-4,
            lr_stage2: 1e-5,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n1: usize,
    pub n2: usize,
    pub stage1_batch: usize,
    pub stage2_batch: usize,
    pub stage1_pool: usize,
    pub gamma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            n1: t.n1,
            n2: t.n2,
            stage1_batch: t.stage1_batch,
            stage2_batch: t.stage2_batch,
            stage1_pool: t.stage1_pool,
            gamma: t.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub horizon: usize,
    pub n_actions: usize,
    pub key_modality: [f64; 3],
    pub distractor_strength: f64,
    pub recency_bias: f64,
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvConfig::default();
        EnvSection {
            horizon: e.horizon,
            n_actions: e.n_actions,
            key_modality: e.key_modality,
            distractor_strength: e.distractor_strength,
            recency_bias: e.recency_bias,
            seed: e.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Episodes written by `generate`.
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub decay: DecayMode,
    pub graph: GraphMode,
    pub hierarchy: bool,
    pub stage2: bool,
    pub memory: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            decay: DecayMode::Learned,
            graph: GraphMode::Learned,
            hierarchy: true,
            stage2: true,
            memory: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub d_raw: usize,
    pub d: usize,
    /// Candidates retrieved per modality.
    pub k: usize,
    pub workers: usize,
    pub index: IndexSection,
    pub attention: AttentionSection,
    pub loss: LossWeights,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub env: EnvSection,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            d_raw: 32,
            d: 64,
            k: 10,
            workers: 1,
            index: IndexSection::default(),
            attention: AttentionSection::default(),
            loss: LossWeights::default(),
            optim: OptimSection::default(),
            train: TrainSection::default(),
            env: EnvSection::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<()> {
    if v < min {
        return Err(Error::Config(format!("field `{field}` = {v} must be at least {min}")));
    }
    Ok(())
}

fn in_range(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v.is_finite() && lo <= v && v <= hi) {
        return Err(Error::Config(format!("field `{field}` = {v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn positive(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config(format!("field `{field}` = {v} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        at_least("d", self.d, 1)?;
        at_least("d_raw", self.d_raw, 1)?;
        at_least("k", self.k, 1)?;
        at_least("workers", self.workers, 1)?;
        at_least("index.window", self.index.window, 1)?;
        at_least("index.rebuild_every", self.index.rebuild_every, 1)?;
        at_least("index.items_per_leaf", self.index.items_per_leaf, 1)?;
        at_least("index.fanout", self.index.fanout, 2)?;
        at_least("index.beam", self.index.beam, 1)?;
        at_least("index.lloyd_iters", self.index.lloyd_iters, 1)?;
        positive("attention.tau", self.attention.tau)?;
        for (i, l) in self.attention.lambda_init.iter().enumerate() {
            in_range(&format!("attention.lambda_init[{i}]"), *l, 0.0, crate::attention::LAMBDA_MAX)?;
        }
        in_range("loss.retrieval", self.loss.retrieval, 0.0, 1e6)?;
        in_range("loss.edge", self.loss.edge, 0.0, 1e6)?;
        in_range("loss.decay", self.loss.decay, 0.0, 1e6)?;
        positive("optim.lr_stage1", self.optim.lr_stage1)?;
        positive("optim.lr_stage2", self.optim.lr_stage2)?;
        in_range("optim.beta1", self.optim.beta1, 0.0, 0.999_999)?;
        in_range("optim.beta2", self.optim.beta2, 0.0, 0.999_999_999)?;
        positive("optim.eps", self.optim.eps)?;
        in_range("optim.weight_decay", self.optim.weight_decay, 0.0, 1.0)?;
        at_least("train.stage1_batch", self.train.stage1_batch, 1)?;
        at_least("train.stage2_batch", self.train.stage2_batch, 1)?;
        at_least("train.stage1_pool", self.train.stage1_pool, 1)?;
        in_range("train.gamma", self.train.gamma, 0.0, 1.0)?;
        at_least("eval.episodes", self.eval.episodes, 1)?;
        self.env_config().validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            horizon: self.env.horizon,
            d_raw: self.d_raw,
            n_actions: self.env.n_actions,
            key_modality: self.env.key_modality,
            distractor_strength: self.env.distractor_strength,
            recency_bias: self.env.recency_bias,
            seed: self.env.seed,
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            window: self.index.window,
            rebuild_every: self.index.rebuild_every,
            items_per_leaf: self.index.items_per_leaf,
            fanout: self.index.fanout,
            beam: self.index.beam,
            lloyd_iters: self.index.lloyd_iters,
            seed: self.seed,
        }
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            graph: self.ablation.graph,
            hierarchy: self.ablation.hierarchy,
            memory: self.ablation.memory,
            explore: false,
            k: self.k,
            index: self.index_config(),
        }
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            d_raw: self.d_raw,
            d: self.d,
            n_actions: self.env.n_actions,
        }
    }

    /// Initial decay rates: the frozen value for non-learned decay modes.
    pub fn initial_lambda(&self) -> [f64; 3] {
        match self.ablation.decay.frozen_lambda() {
            Some(l) => [l; 3],
            None => self.attention.lambda_init,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            n1: self.train.n1,
            n2: self.train.n2,
            lr_stage1: self.optim.lr_stage1,
            lr_stage2: self.optim.lr_stage2,
            stage1_batch: self.train.stage1_batch,
            stage2_batch: self.train.stage2_batch,
            stage1_pool: self.train.stage1_pool,
            gamma: self.train.gamma,
            weights: self.loss,
            adam: self.adam(),
            env: self.env_config(),
            rollout: self.rollout_options(),
            decay_mode: self.ablation.decay,
            stage2: self.ablation.stage2,
            workers: self.workers,
        }
    }
}
