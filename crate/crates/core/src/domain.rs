//! Observations, projected memory items, episodes and the shared-space projection.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Observation channel. Ordering (`Visual < Text < Knowledge`) is the node
/// ordering used by graphs and dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "x")]
    Text,
    #[serde(rename = "k")]
    Knowledge,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Text, Modality::Knowledge];

    pub fn index(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Text => 1,
            Modality::Knowledge => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Text => "x",
            Modality::Knowledge => "k",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Modality> {
        match tag {
            "v" => Some(Modality::Visual),
            "x" => Some(Modality::Text),
            "k" => Some(Modality::Knowledge),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One timestep of raw modality embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 1-based timestep within the episode.
    pub t: usize,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
    pub k: Vec<f64>,
    pub action_type: usize,
    pub task_id: u64,
}

impl Observation {
    pub fn raw(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Visual => &self.v,
            Modality::Text => &self.x,
            Modality::Knowledge => &self.k,
        }
    }

    pub fn validate(&self, d_raw: usize) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Contract("observation timesteps are 1-based".into()));
        }
        for m in Modality::ALL {
            let raw = self.raw(m);
            if raw.len() != d_raw {
                return Err(Error::Dimension {
                    what: "observation embedding",
                    expected: d_raw,
                    actual: raw.len(),
                });
            }
            if !linalg::all_finite(raw.iter().copied()) {
                return Err(Error::Numeric(format!(
                    "non-finite {m} embedding at t={}",
                    self.t
                )));
            }
        }
        Ok(())
    }
}

/// A single-modality memory node in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedItem {
    pub t: usize,
    pub modality: Modality,
    pub e: Vec<f64>,
}

impl ProjectedItem {
    pub fn new(t: usize, modality: Modality, e: Vec<f64>) -> Self {
        ProjectedItem { t, modality, e }
    }

    /// Sort key for deterministic node ordering: (t, modality rank).
    pub fn key(&self) -> (usize, Modality) {
        (self.t, self.modality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task_id: u64,
    pub observations: Vec<Observation>,
    /// Task success, 0 or 1.
    pub reward: u8,
    /// Timesteps annotated as relevant for the final decision.
    pub expert_states: BTreeSet<usize>,
    /// Correct final action, when known (synthetic episodes always carry it).
    pub target_action: Option<usize>,
    /// Channel that carries the planted cue, when known.
    pub cue_modality: Option<Modality>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self, d_raw: usize) -> Result<()> {
        if self.reward > 1 {
            return Err(Error::Contract(format!("reward {} not in {{0,1}}", self.reward)));
        }
        for (i, obs) in self.observations.iter().enumerate() {
            if obs.t != i + 1 {
                return Err(Error::Contract(format!(
                    "episode {}: timestep {} at position {i}, expected {}",
                    self.task_id,
                    obs.t,
                    i + 1
                )));
            }
            obs.validate(d_raw)?;
        }
        let horizon = self.observations.len();
        if let Some(&bad) = self.expert_states.iter().find(|&&s| s == 0 || s > horizon) {
            return Err(Error::Contract(format!(
                "expert state {bad} outside [1, {horizon}]"
            )));
        }
        Ok(())
    }
}

/// Per-modality linear maps from raw embeddings into the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub matrices: [Array2<f64>; 3],
}

impl Projection {
    pub fn new(matrices: [Array2<f64>; 3]) -> Result<Self> {
        let shape = matrices[0].dim();
        for m in &matrices[1..] {
            if m.dim() != shape {
                return Err(Error::Config(format!(
                    "projection shapes differ: {:?} vs {:?}",
                    shape,
                    m.dim()
                )));
            }
        }
        Ok(Projection { matrices })
    }

    /// Seeded projection whose columns are orthonormal when `d >= d_raw`,
    /// so cosines between raw embeddings survive the map.
    pub fn random<R: Rng + ?Sized>(d_raw: usize, d: usize, rng: &mut R) -> Self {
        let matrices = [
            linalg::orthonormal_matrix(d, d_raw, rng),
            linalg::orthonormal_matrix(d, d_raw, rng),
            linalg::orthonormal_matrix(d, d_raw, rng),
        ];
        Projection { matrices }
    }

    pub fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Projection {
            matrices: [eye.clone(), eye.clone(), eye],
        }
    }

    pub fn d(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn d_raw(&self) -> usize {
        self.matrices[0].ncols()
    }

    pub fn project_raw(&self, m: Modality, raw: &[f64]) -> Result<Vec<f64>> {
        let w = &self.matrices[m.index()];
        if raw.len() != w.ncols() {
            return Err(Error::Dimension {
                what: "projection input",
                expected: w.ncols(),
                actual: raw.len(),
            });
        }
        Ok(w.dot(&ArrayView1::from(raw)).to_vec())
    }

    /// Projects one observation into three items ordered v, x, k.
    pub fn project(&self, obs: &Observation) -> Result<[ProjectedItem; 3]> {
        let item = |m: Modality| -> Result<ProjectedItem> {
            Ok(ProjectedItem::new(obs.t, m, self.project_raw(m, obs.raw(m))?))
        };
        Ok([
            item(Modality::Visual)?,
            item(Modality::Text)?,
            item(Modality::Knowledge)?,
        ])
    }

    pub fn project_episode(&self, episode: &Episode) -> Result<Vec<[ProjectedItem; 3]>> {
        episode.observations.iter().map(|o| self.project(o)).collect()
    }
}
