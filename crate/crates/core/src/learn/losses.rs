use serde::{Deserialize, Serialize};

use crate::domain::{Episode, Modality, ProjectedItem};
use crate::error::{Error, Result};
use crate::graph::{pair_inputs, PredictorParams};
use crate::linalg::{cosine, sigmoid};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;
/// Supervision threshold on the cosine of projected embeddings.
pub const LABEL_COSINE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub retrieval: f64,
    pub edge: f64,
    pub decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            retrieval: 1.0,
            edge: 0.1,
            decay: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub retrieval: f64,
    pub edge: f64,
    pub decay: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(retrieval: f64, edge: f64, decay: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            retrieval,
            edge,
            decay,
            total: w.retrieval * retrieval + w.edge * edge + w.decay * decay,
        }
    }
}

/// Same action type and cosine above [`LABEL_COSINE`].
pub fn edge_label(type_i: usize, type_j: usize, cos: f64) -> bool {
    type_i == type_j && cos > LABEL_COSINE
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub earlier: ProjectedItem,
    pub later: ProjectedItem,
    pub label: f64,
}

/// Labels every same-modality pair of an episode; `items[t - 1]` holds the
/// projected items of step `t`.
pub fn edge_labels(episode: &Episode, items: &[[ProjectedItem; 3]]) -> Vec<LabeledPair> {
    let n = items.len().min(episode.observations.len());
    let mut out = Vec::with_capacity(3 * n * n.saturating_sub(1) / 2);
    for j in 0..n {
        for i in 0..j {
            for m in Modality::ALL {
                let (a, b) = (&items[i][m.index()], &items[j][m.index()]);
                let y = edge_label(
                    episode.observations[i].action_type,
                    episode.observations[j].action_type,
                    cosine(&a.e, &b.e),
                );
                out.push(LabeledPair {
                    earlier: a.clone(),
                    later: b.clone(),
                    label: if y { 1.0 } else { 0.0 },
                });
            }
        }
    }
    out
}

/// Mean binary cross-entropy over logits and its gradient with respect to
/// the logits (zero where the probability is clamped).
pub fn bce_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let raw = sigmoid(z);
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(if p == raw { (p - y) / n } else { 0.0 });
    }
    (loss / n, grad)
}

/// Mean BCE of the predictor over labeled pairs, with parameter gradients.
pub fn edge_loss(params: &PredictorParams, pairs: &[LabeledPair]) -> Result<(f64, PredictorParams)> {
    if pairs.is_empty() {
        return Err(Error::Empty("edge_loss needs at least one labeled pair"));
    }
    if let Some(bad) = pairs.iter().find(|p| !(p.label == 0.0 || p.label == 1.0)) {
        return Err(Error::Contract(format!("edge label {} not in {{0, 1}}", bad.label)));
    }
    let x = pair_inputs(params.d(), pairs.iter().map(|p| (&p.earlier, &p.later)));
    let (logits, cache) = params.forward_batch(x);
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    let (loss, dlogits) = bce_logits(logits.as_slice().expect("contiguous"), &labels);
    let (grads, _) = params.backward_batch(&cache, &dlogits.into(), false);
    Ok((loss, grads))
}
