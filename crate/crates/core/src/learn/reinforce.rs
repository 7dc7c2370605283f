use ndarray::Array1;

use crate::env::{EdgeDecision, RolloutRecord};
use crate::graph::{pair_inputs, PredictorParams};
use crate::learn::PROB_CLAMP;
use crate::params::Parameters;

/// `b <- gamma * b + (1 - gamma) * r`.
pub fn update_baseline(b: f64, r: f64, gamma: f64) -> f64 {
    gamma * b + (1.0 - gamma) * r
}

/// `log p(e | phi)` of a realized Bernoulli decision.
pub fn edge_log_prob(on: bool, p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if on {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// Surrogate `-scale * (R - b) * sum_e log p(e)` whose gradient is the
/// score-function estimate for `phi`.
pub fn phi_surrogate(edges: &[EdgeDecision], reward: f64, baseline: f64, scale: f64) -> f64 {
    let s: f64 = edges.iter().map(|e| edge_log_prob(e.on, e.p)).sum();
    -scale * (reward - baseline) * s
}

/// Gradient of [`phi_surrogate`] with respect to each decision's logit.
pub fn phi_dlogits(edges: &[EdgeDecision], reward: f64, baseline: f64, scale: f64) -> Vec<f64> {
    let adv = reward - baseline;
    edges
        .iter()
        .map(|e| -scale * adv * (f64::from(u8::from(e.on)) - e.p))
        .collect()
}

/// Full parameter gradient of one episode's surrogate (scale 1). Returns
/// `None` when the episode made no decisions.
pub fn phi_episode_gradient(
    predictor: &PredictorParams,
    record: &RolloutRecord,
    baseline: f64,
) -> Option<PredictorParams> {
    if record.edges.is_empty() {
        return None;
    }
    let pairs = record.edges.iter().map(|e| {
        let m = e.modality.index();
        (&record.items[e.earlier - 1][m], &record.items[e.later - 1][m])
    });
    let x = pair_inputs(predictor.d(), pairs);
    let (_, cache) = predictor.forward_batch(x);
    let dlogits = Array1::from(phi_dlogits(&record.edges, record.reward, baseline, 1.0));
    Some(predictor.backward_batch(&cache, &dlogits, false).0)
}

/// Variance across episodes of the per-episode phi-gradient norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientVariance {
    /// Running EMA baseline, updated after each episode.
    pub with_baseline: f64,
    /// `b = 0` throughout.
    pub without_baseline: f64,
}

/// Replays `records` in order once with the EMA baseline and once without.
pub fn phi_gradient_variance(predictor: &PredictorParams, records: &[RolloutRecord], gamma: f64) -> GradientVariance {
    let norm = |g: Option<PredictorParams>| g.map_or(0.0, |g| g.flatten().iter().map(|x| x * x).sum::<f64>().sqrt());
    let mut b = 0.0;
    let mut with = Vec::with_capacity(records.len());
    let mut without = Vec::with_capacity(records.len());
    for rec in records {
        with.push(norm(phi_episode_gradient(predictor, rec, b)));
        without.push(norm(phi_episode_gradient(predictor, rec, 0.0)));
        b = update_baseline(b, rec.reward, gamma);
    }
    GradientVariance {
        with_baseline: variance(&with),
        without_baseline: variance(&without),
    }
}

fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
