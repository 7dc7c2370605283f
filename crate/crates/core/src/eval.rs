//! Ranking metrics, memory precision, PR curves and retrieval benchmarks.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::domain::{Episode, Modality, ProjectedItem};
use crate::env::{generate_episode, rollout, EnvConfig, RolloutOptions, RolloutRecord};
use crate::error::{Error, Result};
use crate::index::{retrieve_exact, IndexConfig, MemoryIndex};
use crate::model::{stream_rng, Model, STAGE_EVAL};

/// Relevance of a ranked list, best first, with the episode's total number
/// of relevant items.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub total_relevant: usize,
}

impl RankedList {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, total_relevant: usize) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension {
                what: "ranked list labels",
                expected: scores.len(),
                actual: labels.len(),
            });
        }
        if scores.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Contract("ranked list scores must be non-increasing".into()));
        }
        Ok(RankedList {
            scores,
            labels,
            total_relevant,
        })
    }

    /// Labels only; scores are taken as strictly decreasing ranks.
    pub fn from_labels(labels: &[bool], total_relevant: usize) -> Self {
        RankedList {
            scores: (0..labels.len()).map(|r| -(r as f64)).collect(),
            labels: labels.to_vec(),
            total_relevant,
        }
    }

    fn hits(&self, k: usize) -> usize {
        self.labels.iter().take(k).filter(|&&l| l).count()
    }
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

pub fn ndcg_at_k(list: &RankedList, k: usize) -> f64 {
    if list.total_relevant == 0 {
        return 0.0;
    }
    let dcg: f64 = list
        .labels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(r, _)| discount(r))
        .sum();
    let ideal: f64 = (0..k.min(list.total_relevant)).map(discount).sum();
    dcg / ideal
}

pub fn precision_at_k(list: &RankedList, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    list.hits(k) as f64 / k as f64
}

pub fn recall_at_k(list: &RankedList, k: usize) -> f64 {
    if list.total_relevant == 0 {
        return 0.0;
    }
    list.hits(k) as f64 / list.total_relevant as f64
}

pub fn mrr(list: &RankedList) -> f64 {
    list.labels
        .iter()
        .position(|&l| l)
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Average precision over the top `k`, normalized by the total number of
/// relevant items.
pub fn map_at_k(list: &RankedList, k: usize) -> f64 {
    if list.total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (r, &l) in list.labels.iter().take(k).enumerate() {
        if l {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / list.total_relevant as f64
}

/// Fraction of the top `k` retrieved timesteps lying within `window` steps
/// (inclusive) of some expert state.
pub fn mp_at_k(retrieved: &[usize], expert_states: &BTreeSet<usize>, k: usize, window: usize) -> f64 {
    if expert_states.is_empty() || retrieved.is_empty() || k == 0 {
        return 0.0;
    }
    let top = &retrieved[..k.min(retrieved.len())];
    let near = top
        .iter()
        .filter(|&&t| expert_states.iter().any(|&s| t.abs_diff(s) <= window))
        .count();
    near as f64 / top.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// `(precision, recall)` from the highest threshold down, starting at recall 0.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Precision-recall sweep over the unique scores with trapezoidal area.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            what: "pr_curve labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Empty("pr_curve needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / (tp + fp) as f64, tp as f64 / positives as f64));
    }
    points.insert(0, (points[0].0, 0.0));
    let auc = points
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) * (w[0].0 + w[1].0) / 2.0)
        .sum();
    Ok(PrCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
}

/// Two-sided 97.5% quantile of Student's t with 2 degrees of freedom.
const T_975_DF2: f64 = 4.302652729911275;

/// Mean and 95% half-width over three folds (episode index mod 3).
pub fn three_fold(values: &[f64]) -> MeanCi {
    let mut folds = [0.0; 3];
    let mut counts = [0usize; 3];
    for (i, v) in values.iter().enumerate() {
        folds[i % 3] += v;
        counts[i % 3] += 1;
    }
    let means: Vec<f64> = folds
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    if means.len() < 3 {
        return MeanCi { mean, ci95: 0.0 };
    }
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    MeanCi {
        mean,
        ci95: T_975_DF2 * var.sqrt() / n.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub success: f64,
    pub ndcg: f64,
    pub map: f64,
    pub mrr: f64,
    pub recall: f64,
    pub precision: f64,
    pub mp: f64,
    pub edges_per_node: f64,
}

pub const METRIC_K: usize = 10;
pub const MP_WINDOW: usize = 5;

/// Scores the memory of one rollout's decision step against the expert states.
pub fn episode_metrics(episode: &Episode, record: &RolloutRecord) -> EpisodeMetrics {
    let ranked = record.ranked_timesteps();
    let timesteps: Vec<usize> = ranked.iter().map(|r| r.0).collect();
    let labels: Vec<bool> = timesteps.iter().map(|t| episode.expert_states.contains(t)).collect();
    let list = RankedList::from_labels(&labels, episode.expert_states.len());
    EpisodeMetrics {
        success: record.reward,
        ndcg: ndcg_at_k(&list, METRIC_K),
        map: map_at_k(&list, METRIC_K),
        mrr: mrr(&list),
        recall: recall_at_k(&list, METRIC_K),
        precision: precision_at_k(&list, METRIC_K),
        mp: mp_at_k(&timesteps, &episode.expert_states, METRIC_K, MP_WINDOW),
        edges_per_node: record.edges_per_node(),
    }
}

/// Fixed evaluation set: the same `seed` always yields the same episodes.
pub fn heldout_episodes(env: &EnvConfig, n: usize, seed: u64) -> Vec<Episode> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, STAGE_EVAL, 0, i as u64);
            generate_episode(env, i as u64, &mut rng)
        })
        .collect()
}

/// Greedy, thresholded rollouts over `episodes`.
pub fn evaluate_episodes(
    model: &Model,
    opts: &RolloutOptions,
    episodes: &[Episode],
    seed: u64,
) -> Result<Vec<EpisodeMetrics>> {
    let opts = RolloutOptions {
        explore: false,
        ..opts.clone()
    };
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = stream_rng(seed, STAGE_EVAL, 1, i as u64);
            let rec = rollout(model, ep, &opts, &mut rng)?;
            Ok(episode_metrics(ep, &rec))
        })
        .collect()
}

pub fn success_rate(metrics: &[EpisodeMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.success).sum::<f64>() / metrics.len() as f64
}

pub fn mean_edges_per_node(metrics: &[EpisodeMetrics]) -> f64 {
    if metrics.is_empty() {
        return 0.0;
    }
    metrics.iter().map(|m| m.edges_per_node).sum::<f64>() / metrics.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: &'static str,
    pub t: usize,
    pub node_evaluations: f64,
    pub latency_ns: f64,
    pub overlap_exact: f64,
}

pub const BENCH_HEADER: &str = "mode,T,node_evaluations,latency_ns,overlap_exact";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.mode, self.t, self.node_evaluations, self.latency_ns, self.overlap_exact
        )
    }
}

/// Gaussian clusters around random centers; item `t` belongs to a cluster
/// drawn uniformly.
pub struct ClusteredWorkload {
    centers: Vec<Vec<f64>>,
    spread: f64,
}

impl ClusteredWorkload {
    pub fn new<R: Rng + ?Sized>(clusters: usize, d: usize, spread: f64, rng: &mut R) -> Self {
        let centers = (0..clusters)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        ClusteredWorkload { centers, spread }
    }

    pub fn sample<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> ProjectedItem {
        let c = &self.centers[rng.random_range(0..self.centers.len())];
        let e = c
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + self.spread * z
            })
            .collect();
        ProjectedItem::new(t, Modality::Visual, e)
    }

    pub fn stream<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ProjectedItem> {
        (1..=n).map(|t| self.sample(t, rng)).collect()
    }
}

fn overlap(a: &[usize], b: &[usize]) -> f64 {
    if b.is_empty() {
        return 1.0;
    }
    a.iter().filter(|t| b.contains(t)).count() as f64 / b.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub d: usize,
    pub clusters: usize,
    pub spread: f64,
    pub queries: usize,
    pub k: usize,
    pub index: IndexConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![10, 20, 40, 80, 160, 320, 640],
            seeds: vec![0, 1, 2],
            d: 64,
            clusters: 16,
            spread: 0.5,
            queries: 50,
            k: 10,
            index: IndexConfig::default(),
        }
    }
}

/// Hierarchical and flat retrieval over clustered streams of each size,
/// averaged over seeds and queries. Latency is the mean per query after one
/// warmup pass.
pub fn bench_retrieval(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &t in &cfg.sizes {
        let (mut evals, mut lat_h, mut lat_f, mut ov, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &seed in &cfg.seeds {
            let mut rng = stream_rng(seed, STAGE_EVAL, 2, t as u64);
            let work = ClusteredWorkload::new(cfg.clusters, cfg.d, cfg.spread, &mut rng);
            let items = work.stream(t, &mut rng);
            let mut index = MemoryIndex::new(IndexConfig {
                seed,
                ..cfg.index.clone()
            });
            for it in &items {
                index.insert(it.clone())?;
            }
            let queries: Vec<ProjectedItem> = (0..cfg.queries).map(|_| work.sample(t + 1, &mut rng)).collect();
            for q in &queries {
                let h = index.retrieve(q, cfg.k)?;
                let e = retrieve_exact(&items, q, cfg.k);
                evals += h.node_evaluations as f64;
                let ht: Vec<usize> = h.items.iter().map(|s| s.item.t).collect();
                let et: Vec<usize> = e.iter().map(|s| s.item.t).collect();
                ov += overlap(&ht, &et);
                n += 1.0;
            }
            for pass in 0..2 {
                let start = Instant::now();
                for q in &queries {
                    std::hint::black_box(index.retrieve(q, cfg.k)?);
                }
                let hier = start.elapsed().as_nanos() as f64;
                let start = Instant::now();
                for q in &queries {
                    std::hint::black_box(retrieve_exact(&items, q, cfg.k));
                }
                let flat = start.elapsed().as_nanos() as f64;
                if pass == 1 {
                    lat_h += hier / queries.len() as f64;
                    lat_f += flat / queries.len() as f64;
                }
            }
        }
        let s = cfg.seeds.len() as f64;
        rows.push(BenchRow {
            mode: "hierarchical",
            t,
            node_evaluations: evals / n,
            latency_ns: lat_h / s,
            overlap_exact: ov / n,
        });
        rows.push(BenchRow {
            mode: "flat",
            t,
            node_evaluations: t as f64,
            latency_ns: lat_f / s,
            overlap_exact: 1.0,
        });
    }
    Ok(rows)
}
