use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{decay_loss, decay_loss_grad, fuse_backward};
use crate::domain::{Episode, ProjectedItem};
use crate::env::{generate_episode, rollout, EnvConfig, GraphMode, RolloutOptions, RolloutRecord};
use crate::error::{Error, Result};
use crate::graph::pair_inputs;
use crate::learn::{
    bce_logits, edge_label, edge_labels, edge_log_prob, edge_loss, update_baseline, AdamConfig, AdamW, LabeledPair,
    LossBreakdown, LossWeights,
};
use crate::linalg::{cosine, sigmoid};
use crate::model::{stream_rng, Grads, Model, STAGE_EDGE, STAGE_TASK};
use crate::params::Parameters;

pub const METRICS_HEADER: &str =
    "step,stage,loss_total,loss_edge,loss_decay,loss_retrieval,success_rate,lambda_v,lambda_x,lambda_k,baseline";

/// Decay rate every modality is pinned to by [`DecayMode::Uniform`].
pub const UNIFORM_LAMBDA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    Learned,
    /// All rates frozen at 0.25.
    Uniform,
    /// All rates frozen at 0.
    None,
}

impl DecayMode {
    /// Frozen value of every rate, if any.
    pub fn frozen_lambda(self) -> Option<f64> {
        match self {
            DecayMode::Learned => None,
            DecayMode::Uniform => Some(UNIFORM_LAMBDA),
            DecayMode::None => Some(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub n1: usize,
    pub n2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    /// Labeled pairs per Stage-1 step, half positive and half negative.
    pub stage1_batch: usize,
    /// Episodes per Stage-2 step.
    pub stage2_batch: usize,
    /// Episodes generated to draw Stage-1 pairs from.
    pub stage1_pool: usize,
    pub gamma: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub env: EnvConfig,
    pub rollout: RolloutOptions,
    pub decay_mode: DecayMode,
    pub stage2: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            n1: 2000,
            n2: 2000,
            lr_stage1: 1e-4,
            lr_stage2: 1e-5,
            stage1_batch: 64,
            stage2_batch: 4,
            stage1_pool: 256,
            gamma: 0.99,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            env: EnvConfig::default(),
            rollout: RolloutOptions::default(),
            decay_mode: DecayMode::Learned,
            stage2: true,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub baseline: f64,
    pub optimizer: AdamW,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, adam: AdamConfig, seed: u64) -> Self {
        TrainState {
            model,
            baseline: 0.0,
            optimizer: AdamW::new(adam),
            stage1_steps: 0,
            stage2_steps: 0,
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !self.baseline.is_finite() {
            return Err(Error::Numeric(format!("baseline is {}", self.baseline)));
        }
        if self.model.decay.lambda.iter().any(|l| *l < 0.0) {
            return Err(Error::Numeric("negative decay rate".into()));
        }
        let finite = self
            .optimizer
            .moments
            .values()
            .all(|s| s.m.iter().chain(&s.v).all(|x| x.is_finite()));
        if !finite || !self.model.all_finite() {
            return Err(Error::Numeric("non-finite parameters or moments".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub loss_total: f64,
    pub loss_edge: f64,
    pub loss_decay: Option<f64>,
    pub loss_retrieval: Option<f64>,
    pub success_rate: Option<f64>,
    pub lambda: [f64; 3],
    pub baseline: f64,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            self.loss_total,
            self.loss_edge,
            cell(self.loss_decay),
            cell(self.loss_retrieval),
            cell(self.success_rate),
            self.lambda[0],
            self.lambda[1],
            self.lambda[2],
            self.baseline
        )
    }
}

/// Stage-1 supervision drawn from a fixed set of episodes.
#[derive(Debug, Clone)]
pub struct PairPool {
    pub pairs: Vec<LabeledPair>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl PairPool {
    /// `n` pairs, half from each class when both are present.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<LabeledPair> {
        let (pos, neg) = match (self.positives.is_empty(), self.negatives.is_empty()) {
            (false, false) => (n / 2, n - n / 2),
            (false, true) => (n, 0),
            _ => (0, n),
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..pos {
            out.push(self.pairs[self.positives[rng.random_range(0..self.positives.len())]].clone());
        }
        for _ in 0..neg {
            out.push(self.pairs[self.negatives[rng.random_range(0..self.negatives.len())]].clone());
        }
        out
    }
}

pub fn stage1_pairs(model: &Model, episodes: &[Episode]) -> Result<PairPool> {
    let mut pairs = Vec::new();
    for ep in episodes {
        let items = model.projection.project_episode(ep)?;
        pairs.extend(edge_labels(ep, &items));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no labeled pairs for Stage 1"));
    }
    let positives = (0..pairs.len()).filter(|&i| pairs[i].label == 1.0).collect();
    let negatives = (0..pairs.len()).filter(|&i| pairs[i].label == 0.0).collect();
    Ok(PairPool {
        pairs,
        positives,
        negatives,
    })
}

/// Runs `f(0..n)` over `workers` threads and returns the results in index order.
fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("rollout worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every slot filled")).collect()
}

/// Gradients and loss of one Stage-2 batch, plus the baseline after all
/// episodes. Each episode's advantage uses the baseline before its update.
pub fn batch_gradients(
    model: &Model,
    cfg: &TrainConfig,
    episodes: &[&Episode],
    records: &[RolloutRecord],
    baseline: f64,
) -> (Grads, LossBreakdown, f64) {
    let d = model.d();
    let w = cfg.weights;
    let scale = 1.0 / records.len().max(1) as f64;
    let learned_graph = cfg.rollout.graph == GraphMode::Learned;
    let mut g = model.zero_grads();
    let mut retrieval = 0.0;
    let mut b = baseline;

    let mut rows: Vec<(&ProjectedItem, &ProjectedItem)> = Vec::new();
    let mut decisions: Vec<(f64, f64)> = Vec::new(); // (on, advantage)
    let mut labels: Vec<f64> = Vec::new();

    for (ep, rec) in episodes.iter().zip(records) {
        let r = rec.reward;
        for s in &rec.steps {
            retrieval -= scale * r * s.action.log_prob;
        }
        if r != 0.0 {
            let upstream = -w.retrieval * r * scale;
            for s in &rec.steps {
                let (gp, dinput) = model
                    .policy
                    .backward_log_prob(&s.input, &s.action.forward, s.action.action, upstream);
                g.policy.add_scaled(&gp, 1.0);
                if cfg.rollout.memory {
                    let q = &rec.items[s.t - 1];
                    let fg = fuse_backward(
                        [&q[0], &q[1], &q[2]],
                        [&s.pools[0][..], &s.pools[1][..], &s.pools[2][..]],
                        &model.decay,
                        &s.memory,
                        &dinput[d..],
                    );
                    g.decay.add_scaled(&fg.params, 1.0);
                }
            }
        }
        if learned_graph {
            for e in &rec.edges {
                let m = e.modality.index();
                let (a, c) = (&rec.items[e.earlier - 1][m], &rec.items[e.later - 1][m]);
                retrieval -= scale * (r - b) * edge_log_prob(e.on, e.p);
                rows.push((a, c));
                decisions.push((f64::from(u8::from(e.on)), r - b));
                let y = edge_label(
                    ep.observations[e.earlier - 1].action_type,
                    ep.observations[e.later - 1].action_type,
                    cosine(&a.e, &c.e),
                );
                labels.push(if y { 1.0 } else { 0.0 });
            }
        }
        b = update_baseline(b, r, cfg.gamma);
    }

    let mut edge = 0.0;
    if !rows.is_empty() {
        let x = pair_inputs(d, rows.into_iter());
        let (logits, cache) = model.predictor.forward_batch(x);
        let (loss, dedge) = bce_logits(logits.as_slice().expect("contiguous"), &labels);
        edge = loss;
        let dlogits: Array1<f64> = logits
            .iter()
            .zip(&decisions)
            .zip(&dedge)
            .map(|((&z, &(on, adv)), &de)| -w.retrieval * scale * adv * (on - sigmoid(z)) + w.edge * de)
            .collect();
        g.predictor = model.predictor.backward_batch(&cache, &dlogits, false).0;
    }

    if cfg.decay_mode == DecayMode::Learned {
        for (gl, dl) in g.decay.lambda.iter_mut().zip(decay_loss_grad(&model.decay)) {
            *gl += w.decay * dl;
        }
    } else {
        g.decay.lambda.fill(0.0);
    }
    let loss = LossBreakdown::new(retrieval, edge, decay_loss(&model.decay), &w);
    (g, loss, b)
}

fn lambda_of(model: &Model) -> [f64; 3] {
    let l = &model.decay.lambda;
    [l[0], l[1], l[2]]
}

fn stage1_step(state: &mut TrainState, cfg: &TrainConfig, pool: &PairPool, step: usize) -> Result<MetricsRow> {
    let mut rng = stream_rng(cfg.seed, STAGE_EDGE, step as u64, 0);
    let batch = pool.sample(cfg.stage1_batch, &mut rng);
    let (loss, grads) = edge_loss(&state.model.predictor, &batch)?;
    if grads.all_finite() && loss.is_finite() {
        state
            .optimizer
            .step("predictor.", &mut state.model.predictor, &grads, cfg.lr_stage1);
    } else {
        log::warn!("stage 1 step {step}: non-finite gradient, step skipped");
    }
    Ok(MetricsRow {
        step,
        stage: 1,
        loss_total: loss,
        loss_edge: loss,
        loss_decay: None,
        loss_retrieval: None,
        success_rate: None,
        lambda: lambda_of(&state.model),
        baseline: state.baseline,
    })
}

fn task_episode(cfg: &TrainConfig, dataset: Option<&[Episode]>, step: usize, idx: usize) -> (Episode, rand_chacha::ChaCha8Rng) {
    let mut rng = stream_rng(cfg.seed, STAGE_TASK, step as u64, idx as u64);
    let ep = match dataset {
        Some(eps) if !eps.is_empty() => eps[rng.random_range(0..eps.len())].clone(),
        _ => {
            let task_id = (step * cfg.stage2_batch + idx) as u64;
            generate_episode(&cfg.env, task_id, &mut rng)
        }
    };
    (ep, rng)
}

fn stage2_step(state: &mut TrainState, cfg: &TrainConfig, dataset: Option<&[Episode]>, step: usize) -> MetricsRow {
    let opts = RolloutOptions {
        explore: true,
        ..cfg.rollout.clone()
    };
    let model = &state.model;
    let results = parallel_map(cfg.stage2_batch, cfg.workers, |idx| {
        let (ep, mut rng) = task_episode(cfg, dataset, step, idx);
        let rec = rollout(model, &ep, &opts, &mut rng);
        (ep, rec)
    });
    let mut episodes = Vec::new();
    let mut records = Vec::new();
    for (ep, rec) in results {
        match rec {
            Ok(r) => {
                episodes.push(ep);
                records.push(r);
            }
            Err(e) => log::warn!("stage 2 step {step}: episode {} discarded: {e}", ep.task_id),
        }
    }
    let success = if records.is_empty() {
        None
    } else {
        Some(records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64)
    };
    let ep_refs: Vec<&Episode> = episodes.iter().collect();
    let (grads, loss, new_baseline) = batch_gradients(&state.model, cfg, &ep_refs, &records, state.baseline);
    state.baseline = new_baseline;
    if !records.is_empty() {
        if grads.all_finite() && loss.total.is_finite() {
            let lr = cfg.lr_stage2;
            let opt = &mut state.optimizer;
            if cfg.rollout.graph == GraphMode::Learned {
                opt.step("predictor.", &mut state.model.predictor, &grads.predictor, lr);
            }
            opt.step("decay.", &mut state.model.decay, &grads.decay, lr);
            opt.step("policy.", &mut state.model.policy, &grads.policy, lr);
            state.model.decay.clamp_lambda();
        } else {
            log::warn!("stage 2 step {step}: non-finite gradient, step skipped");
        }
    }
    MetricsRow {
        step,
        stage: 2,
        loss_total: loss.total,
        loss_edge: loss.edge,
        loss_decay: Some(loss.decay),
        loss_retrieval: Some(loss.retrieval),
        success_rate: success,
        lambda: lambda_of(&state.model),
        baseline: state.baseline,
    }
}

/// Episodes Stage 1 draws its pairs from.
pub fn stage1_episodes(cfg: &TrainConfig) -> Vec<Episode> {
    (0..cfg.stage1_pool)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, STAGE_EDGE, u64::from(u32::MAX), i as u64);
            generate_episode(&cfg.env, i as u64, &mut rng)
        })
        .collect()
}

/// Continues the two-stage schedule from the step counters in `state`,
/// calling `sink` with every metrics row.
pub fn train(
    cfg: &TrainConfig,
    state: &mut TrainState,
    dataset: Option<&[Episode]>,
    sink: &mut dyn FnMut(&MetricsRow),
) -> Result<()> {
    let learned_graph = cfg.rollout.graph == GraphMode::Learned;
    if learned_graph && state.stage1_steps < cfg.n1 {
        let episodes = match dataset {
            Some(eps) if !eps.is_empty() => eps.to_vec(),
            _ => stage1_episodes(cfg),
        };
        let pool = stage1_pairs(&state.model, &episodes)?;
        log::info!(
            "stage 1: {} pairs ({} positive) from {} episodes",
            pool.pairs.len(),
            pool.positives.len(),
            episodes.len()
        );
        while state.stage1_steps < cfg.n1 {
            let row = stage1_step(state, cfg, &pool, state.stage1_steps)?;
            state.stage1_steps += 1;
            sink(&row);
        }
    }
    if cfg.stage2 {
        while state.stage2_steps < cfg.n2 {
            let row = stage2_step(state, cfg, dataset, state.stage2_steps);
            state.stage2_steps += 1;
            sink(&row);
        }
    }
    state.check()
}
