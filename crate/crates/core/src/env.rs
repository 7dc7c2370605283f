//! Synthetic key-recall environment and the action policy.
//!
//! Each episode plants one cue observation carrying the answer in a key
//! block of one modality. The final observation is a query that shares the
//! cue's action type and signature but carries no answer, so the agent has
//! to recall the cue through memory. Distractors of other action types grow
//! more similar to the query as the episode advances.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{fuse, MemoryVector};
use crate::domain::{Episode, Modality, Observation, ProjectedItem};
use crate::error::{Error, Result};
use crate::graph::{pair_inputs, EDGE_THRESHOLD};
use crate::index::{retrieve_exact, IndexConfig, MemoryIndex, ScoredItem};
use crate::linalg::{self, cosine, sigmoid};
use crate::model::Model;
use crate::params::{Dense, Parameters};

pub const ACTION_TYPE_NAMES: [&str; 4] = ["navigate", "search", "inspect", "select"];
/// Action type shared by the cue, its copies and the final query.
pub const INSPECT: usize = 2;
pub const SIGNATURE_DIM: usize = 8;
pub const POLICY_HIDDEN: usize = 64;

const KEY_SCALE: f64 = 1.5;
const SIGNATURE_SCALE: f64 = 1.5;
const DISTRACTOR_KEY: f64 = 1.0;
const NOISE_STD: f64 = 0.15;
const WEAK_COPY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Episode length T.
    pub horizon: usize,
    pub d_raw: usize,
    pub n_actions: usize,
    /// Probability of planting the cue in each modality (v, x, k).
    pub key_modality: [f64; 3],
    pub distractor_strength: f64,
    pub recency_bias: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 12,
            d_raw: 32,
            n_actions: 4,
            key_modality: [1.0 / 3.0; 3],
            distractor_strength: 1.0,
            recency_bias: 1.5,
            seed: 7,
        }
    }
}

impl EnvConfig {
    /// First coordinate of each raw block: key, action type, signature, noise.
    pub fn layout(&self) -> [usize; 4] {
        let n = self.n_actions;
        [0, n, n + ACTION_TYPE_NAMES.len(), n + ACTION_TYPE_NAMES.len() + SIGNATURE_DIM]
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 5 {
            return Err(Error::Config(format!("env.horizon = {} must be at least 5", self.horizon)));
        }
        if self.n_actions < 2 {
            return Err(Error::Config(format!("env.n_actions = {} must be at least 2", self.n_actions)));
        }
        let need = self.layout()[3] + 1;
        if self.d_raw < need {
            return Err(Error::Config(format!(
                "env.d_raw = {} too small; needs at least {need} for n_actions = {}",
                self.d_raw, self.n_actions
            )));
        }
        let total: f64 = self.key_modality.iter().sum();
        if self.key_modality.iter().any(|p| !p.is_finite() || *p < 0.0) || total <= 0.0 {
            return Err(Error::Config("env.key_modality must be non-negative with positive sum".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_strength) {
            return Err(Error::Config(format!(
                "env.distractor_strength = {} outside [0, 1]",
                self.distractor_strength
            )));
        }
        if !(self.recency_bias >= 0.0 && self.recency_bias.is_finite()) {
            return Err(Error::Config(format!("env.recency_bias = {} must be >= 0", self.recency_bias)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Distractor,
    Cue,
    /// Same action type and signature as the cue, with the given answer and key scale.
    Copy(usize, bool),
    Query,
}

fn unit_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = linalg::norm(&v);
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn other_answer<R: Rng + ?Sized>(n: usize, avoid: &[usize], rng: &mut R) -> usize {
    let choices: Vec<usize> = (0..n).filter(|a| !avoid.contains(a)).collect();
    if choices.is_empty() {
        (avoid[0] + 1) % n
    } else {
        *choices.choose(rng).expect("non-empty")
    }
}

/// Generates one episode; every draw comes from `rng`.
pub fn generate_episode<R: Rng + ?Sized>(cfg: &EnvConfig, task_id: u64, rng: &mut R) -> Episode {
    let horizon = cfg.horizon;
    let n = cfg.n_actions;
    let [key0, type0, sig0, noise0] = cfg.layout();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");

    let answer = rng.random_range(0..n);
    let total: f64 = cfg.key_modality.iter().sum();
    let mut u = rng.random_range(0.0..total);
    let mut cue_mod = Modality::Knowledge;
    for m in Modality::ALL {
        if u < cfg.key_modality[m.index()] {
            cue_mod = m;
            break;
        }
        u -= cfg.key_modality[m.index()];
    }
    let t_cue = rng.random_range(2..=(horizon - 4).max(2));
    let signature = unit_vector(SIGNATURE_DIM, rng);

    let mut roles = vec![Role::Distractor; horizon + 1];
    roles[t_cue] = Role::Cue;
    roles[horizon] = Role::Query;
    match cue_mod {
        Modality::Visual => {
            let w1 = other_answer(n, &[answer], rng);
            let w2 = other_answer(n, &[answer, w1], rng);
            roles[t_cue - 1] = Role::Copy(w1, true);
            if t_cue >= 3 {
                roles[t_cue - 2] = Role::Copy(w2, true);
            }
        }
        Modality::Text => {
            roles[t_cue + 1] = Role::Copy(answer, false);
            roles[t_cue + 2] = Role::Copy(answer, false);
        }
        Modality::Knowledge => {
            roles[t_cue - 1] = Role::Copy(other_answer(n, &[answer], rng), false);
        }
    }

    let ds = cfg.distractor_strength;
    let mut observations = Vec::with_capacity(horizon);
    for (t, &role) in roles.iter().enumerate().skip(1) {
        let action_type = match role {
            Role::Distractor => *[0, 1, 3].choose(rng).expect("non-empty"),
            _ => INSPECT,
        };
        let mut raws: [Vec<f64>; 3] = Default::default();
        for m in Modality::ALL {
            let mut raw = vec![0.0; cfg.d_raw];
            raw[type0 + action_type] = 1.0;
            for x in &mut raw[noise0..] {
                *x = noise.sample(rng);
            }
            let carries = m == cue_mod || role == Role::Query;
            if carries {
                let (key, sig) = match role {
                    Role::Query => (None, SIGNATURE_SCALE),
                    Role::Cue => (Some((answer, KEY_SCALE)), SIGNATURE_SCALE),
                    Role::Copy(a, strong) => {
                        let scale = if strong { KEY_SCALE } else { WEAK_COPY * KEY_SCALE };
                        (Some((a, scale)), ds * SIGNATURE_SCALE)
                    }
                    Role::Distractor => {
                        let wrong = other_answer(n, &[answer], rng);
                        let growth = 1.0 + cfg.recency_bias * t as f64 / horizon as f64;
                        (Some((wrong, ds * DISTRACTOR_KEY)), ds * SIGNATURE_SCALE * growth)
                    }
                };
                if let Some((a, scale)) = key {
                    raw[key0 + a] = scale;
                }
                for (x, s) in raw[sig0..sig0 + SIGNATURE_DIM].iter_mut().zip(&signature) {
                    *x = sig * s;
                }
            }
            raws[m.index()] = raw;
        }
        let [v, x, k] = raws;
        observations.push(Observation {
            t,
            v,
            x,
            k,
            action_type,
            task_id,
        });
    }

    Episode {
        task_id,
        observations,
        reward: 1,
        expert_states: BTreeSet::from([t_cue]),
        target_action: Some(answer),
        cue_modality: Some(cue_mod),
    }
}

pub fn cue_step(episode: &Episode) -> Option<usize> {
    episode.expert_states.iter().next().copied()
}

/// `concat(fused current observation, m_t)` -> 64 -> `n_actions`, ReLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub l1: Dense,
    pub l2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyForward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(d: usize, n_actions: usize) -> Self {
        PolicyParams {
            l1: Dense::zeros(2 * d, POLICY_HIDDEN),
            l2: Dense::zeros(POLICY_HIDDEN, n_actions),
        }
    }

    /// Glorot hidden layer; the output layer starts at zero so the initial
    /// policy is uniform.
    pub fn random<R: Rng + ?Sized>(d: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, n_actions);
        p.l1.w = linalg::uniform_matrix(POLICY_HIDDEN, 2 * d, linalg::glorot_limit(2 * d, POLICY_HIDDEN), rng);
        p
    }

    pub fn d(&self) -> usize {
        self.l1.input_dim() / 2
    }

    pub fn n_actions(&self) -> usize {
        self.l2.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d(), self.n_actions())
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, alpha: f64) {
        self.l1.add_scaled(&other.l1, alpha);
        self.l2.add_scaled(&other.l2, alpha);
    }

    pub fn forward(&self, input: &[f64]) -> PolicyForward {
        let mut hidden = self.l1.forward(input);
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let logits = self.l2.forward(&hidden);
        let probs = linalg::softmax(&logits);
        PolicyForward { hidden, logits, probs }
    }

    /// Gradient of `upstream * log pi(action)` with respect to the
    /// parameters and to the input.
    pub fn backward_log_prob(
        &self,
        input: &[f64],
        fwd: &PolicyForward,
        action: usize,
        upstream: f64,
    ) -> (PolicyParams, Vec<f64>) {
        let mut g = self.zeros_like();
        let dlogits: Vec<f64> = fwd
            .probs
            .iter()
            .enumerate()
            .map(|(a, p)| upstream * (f64::from(u8::from(a == action)) - p))
            .collect();
        let mut dhidden = vec![0.0; POLICY_HIDDEN];
        for (a, &dl) in dlogits.iter().enumerate() {
            g.l2.b[a] = dl;
            for (h, &hv) in fwd.hidden.iter().enumerate() {
                g.l2.w[[a, h]] = dl * hv;
                dhidden[h] += dl * self.l2.w[[a, h]];
            }
        }
        for (dh, &hv) in dhidden.iter_mut().zip(&fwd.hidden) {
            if hv <= 0.0 {
                *dh = 0.0;
            }
        }
        let mut dinput = vec![0.0; input.len()];
        for (h, &dh) in dhidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            g.l1.b[h] = dh;
            let w = self.l1.w.row(h);
            for (i, (&x, &wv)) in input.iter().zip(w.iter()).enumerate() {
                g.l1.w[[h, i]] = dh * x;
                dinput[i] += dh * wv;
            }
        }
        (g, dinput)
    }
}

impl Parameters for PolicyParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64], bool)) {
        self.l1.visit("l1", f);
        self.l2.visit("l2", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut("l1", f);
        self.l2.visit_mut("l2", f);
    }
}

/// Mean of the three projected current items followed by `m_t`.
pub fn policy_input(current: &[ProjectedItem; 3], memory: &[f64]) -> Vec<f64> {
    let d = memory.len();
    let mut x = vec![0.0; 2 * d];
    for it in current {
        linalg::axpy(1.0 / 3.0, &it.e, &mut x[..d]);
    }
    x[d..].copy_from_slice(memory);
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub action: usize,
    pub log_prob: f64,
    pub forward: PolicyForward,
}

/// Samples from the policy, or takes the most probable action when `greedy`.
pub fn act<R: Rng + ?Sized>(policy: &PolicyParams, input: &[f64], rng: &mut R, greedy: bool) -> Action {
    let forward = policy.forward(input);
    let action = if greedy {
        let mut best = 0;
        for (a, p) in forward.probs.iter().enumerate() {
            if *p > forward.probs[best] {
                best = a;
            }
        }
        best
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = forward.probs.len() - 1;
        for (a, p) in forward.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = a;
                break;
            }
        }
        chosen
    };
    let max = forward.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + forward.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Action {
        action,
        log_prob: forward.logits[action] - lse,
        forward,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GraphMode {
    /// `g_phi` decisions (sampled in training, thresholded in evaluation).
    Learned,
    /// Edge iff cosine exceeds the threshold.
    Threshold(f64),
    /// Every pair is an edge.
    Dense,
}

impl std::str::FromStr for GraphMode {
    type Err = Error;

    /// `learned`, `dense` or `threshold:<tau>` with `tau` in [-1, 1].
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(GraphMode::Learned),
            "dense" => Ok(GraphMode::Dense),
            _ => {
                let tau = s
                    .strip_prefix("threshold:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("graph mode `{s}` is not learned, dense or threshold:<tau>"))
                    })?;
                if !(-1.0..=1.0).contains(&tau) {
                    return Err(Error::Config(format!("graph threshold {tau} outside [-1, 1]")));
                }
                Ok(GraphMode::Threshold(tau))
            }
        }
    }
}

impl std::fmt::Display for GraphMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphMode::Learned => f.write_str("learned"),
            GraphMode::Dense => f.write_str("dense"),
            GraphMode::Threshold(tau) => write!(f, "threshold:{tau}"),
        }
    }
}

impl TryFrom<String> for GraphMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GraphMode> for String {
    fn from(g: GraphMode) -> String {
        g.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOptions {
    pub graph: GraphMode,
    pub hierarchy: bool,
    pub memory: bool,
    /// Sample edges and actions (training) instead of thresholding and acting greedily.
    pub explore: bool,
    pub k: usize,
    pub index: IndexConfig,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            graph: GraphMode::Learned,
            hierarchy: true,
            memory: true,
            explore: false,
            k: 10,
            index: IndexConfig::default(),
        }
    }
}

/// One decision on a same-modality pair `(earlier, later)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDecision {
    pub earlier: usize,
    pub later: usize,
    pub modality: Modality,
    /// Predictor probability (learned graph) or cosine (threshold graph).
    pub p: f64,
    pub on: bool,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    /// Retrieval candidates per modality, in rank order, before graph filtering.
    pub candidates: [Vec<ScoredItem>; 3],
    /// Attention pools after graph filtering.
    pub pools: [Vec<ProjectedItem>; 3],
    pub memory: MemoryVector,
    pub input: Vec<f64>,
    pub action: Action,
    pub node_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub task_id: u64,
    pub items: Vec<[ProjectedItem; 3]>,
    pub steps: Vec<StepRecord>,
    pub edges: Vec<EdgeDecision>,
    pub reward: f64,
}

impl RolloutRecord {
    pub fn final_action(&self) -> usize {
        self.steps.last().map_or(0, |s| s.action.action)
    }

    /// Timesteps ranked by their total attention mass in the final memory vector.
    pub fn ranked_timesteps(&self) -> Vec<(usize, f64)> {
        let Some(last) = self.steps.last() else {
            return Vec::new();
        };
        let mut mass: std::collections::BTreeMap<usize, f64> = Default::default();
        for m in Modality::ALL {
            let i = m.index();
            for (it, a) in last.pools[i].iter().zip(&last.memory.contributing_weights[i]) {
                *mass.entry(it.t).or_default() += last.memory.beta[i] * a;
            }
        }
        let mut out: Vec<(usize, f64)> = mass.into_iter().collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn edges_per_node(&self) -> f64 {
        let nodes = 3 * self.items.len();
        if nodes == 0 {
            return 0.0;
        }
        2.0 * self.edges.iter().filter(|e| e.on).count() as f64 / nodes as f64
    }
}

/// Runs the memory pipeline over an episode: project, decide edges for the
/// new pairs, retrieve, filter by the graph, fuse and act.
pub fn rollout<R: Rng + ?Sized>(
    model: &Model,
    episode: &Episode,
    opts: &RolloutOptions,
    rng: &mut R,
) -> Result<RolloutRecord> {
    let d = model.d();
    let target = episode
        .target_action
        .ok_or_else(|| Error::Contract(format!("episode {} has no target action", episode.task_id)))?;
    let items = model.projection.project_episode(episode)?;
    let mut indexes: Vec<MemoryIndex> = (0..3).map(|_| MemoryIndex::new(opts.index.clone())).collect();
    let mut history: [Vec<ProjectedItem>; 3] = Default::default();
    let mut edges = Vec::new();
    let mut steps = Vec::with_capacity(items.len());

    for current in &items {
        let t = current[0].t;
        // decisions on (i, t) for every earlier i in the same modality
        let first_new = edges.len();
        let pairs: Vec<(&ProjectedItem, &ProjectedItem)> = Modality::ALL
            .iter()
            .flat_map(|m| history[m.index()].iter().map(move |old| (old, &current[m.index()])))
            .collect();
        let probs: Vec<f64> = match opts.graph {
            GraphMode::Learned if !pairs.is_empty() => {
                let x = pair_inputs(d, pairs.iter().copied());
                model.predictor.logits(x).iter().map(|&z| sigmoid(z)).collect()
            }
            GraphMode::Threshold(_) => pairs.iter().map(|(a, b)| cosine(&a.e, &b.e)).collect(),
            _ => vec![1.0; pairs.len()],
        };
        for ((a, b), p) in pairs.iter().zip(probs) {
            let on = match opts.graph {
                GraphMode::Learned if opts.explore => rng.random::<f64>() < p,
                GraphMode::Learned => p > EDGE_THRESHOLD,
                GraphMode::Threshold(tau) => p > tau,
                GraphMode::Dense => true,
            };
            edges.push(EdgeDecision {
                earlier: a.t,
                later: b.t,
                modality: a.modality,
                p,
                on,
            });
        }
        let linked = |m: Modality, old_t: usize| {
            edges[first_new..]
                .iter()
                .any(|e: &EdgeDecision| e.on && e.modality == m && e.earlier == old_t)
        };

        let mut candidates: [Vec<ScoredItem>; 3] = Default::default();
        let mut pools: [Vec<ProjectedItem>; 3] = Default::default();
        let mut node_evaluations = 0;
        for m in Modality::ALL {
            let i = m.index();
            if history[i].is_empty() {
                continue;
            }
            let found = if opts.hierarchy {
                let r = indexes[i].retrieve(&current[i], opts.k)?;
                node_evaluations += r.node_evaluations;
                r.items
            } else {
                node_evaluations += history[i].len();
                retrieve_exact(&history[i], &current[i], opts.k)
            };
            pools[i] = found
                .iter()
                .filter(|s| linked(m, s.item.t))
                .map(|s| s.item.clone())
                .collect();
            candidates[i] = found;
        }

        let memory = if opts.memory {
            fuse(
                [&current[0], &current[1], &current[2]],
                [&pools[0][..], &pools[1][..], &pools[2][..]],
                &model.decay,
            )?
        } else {
            MemoryVector::zeros(d)
        };
        let input = policy_input(current, &memory.m);
        let action = act(&model.policy, &input, rng, !opts.explore);
        if !action.log_prob.is_finite() {
            return Err(Error::Numeric(format!("non-finite action log-prob at t={t}")));
        }
        steps.push(StepRecord {
            t,
            candidates,
            pools,
            memory,
            input,
            action,
            node_evaluations,
        });

        for m in Modality::ALL {
            let i = m.index();
            indexes[i].insert(current[i].clone())?;
            history[i].push(current[i].clone());
        }
    }

    let reward = steps
        .last()
        .map_or(0.0, |s| if s.action.action == target { 1.0 } else { 0.0 });
    Ok(RolloutRecord {
        task_id: episode.task_id,
        items,
        steps,
        edges,
        reward,
    })
}
