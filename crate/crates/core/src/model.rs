use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::DecayParams;
use crate::domain::Projection;
use crate::env::PolicyParams;
use crate::error::{Error, Result};
use crate::graph::PredictorParams;
use crate::linalg::{self};
use crate::params::{NamedTensor, Parameters};

/// Deterministic generator for one `(stage, step, index)` slot of a run.
///
/// Every random draw in training and evaluation comes from one of these, so
/// results do not depend on how episodes are spread over worker threads.
pub fn stream_rng(seed: u64, stage: u8, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(stage) << 56) ^ ((step & 0xFFFF_FFFF) << 24) ^ (index & 0xFF_FFFF));
    rng
}

pub const STAGE_INIT: u8 = 0;
pub const STAGE_EDGE: u8 = 1;
pub const STAGE_TASK: u8 = 2;
pub const STAGE_EVAL: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub projection: Projection,
    pub predictor: PredictorParams,
    pub decay: DecayParams,
    pub policy: PolicyParams,
}

/// Gradients for the trainable parts of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub predictor: PredictorParams,
    pub decay: DecayParams,
    pub policy: PolicyParams,
}

impl Grads {
    pub fn all_finite(&self) -> bool {
        self.predictor.all_finite() && self.decay.all_finite() && self.policy.all_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub d_raw: usize,
    pub d: usize,
    pub n_actions: usize,
}

impl Model {
    pub fn init(shape: ModelShape, lambda_init: [f64; 3], tau: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, STAGE_INIT, 0, 0);
        let projection = Projection::random(shape.d_raw, shape.d, &mut rng);
        let predictor = PredictorParams::random(shape.d, &mut rng);
        let decay = DecayParams::random(shape.d, lambda_init, tau, &mut rng);
        let policy = PolicyParams::random(shape.d, shape.n_actions, &mut rng);
        Model {
            projection,
            predictor,
            decay,
            policy,
        }
    }

    pub fn d(&self) -> usize {
        self.projection.d()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_raw: self.projection.d_raw(),
            d: self.d(),
            n_actions: self.policy.n_actions(),
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            predictor: self.predictor.zeros_like(),
            decay: self.decay.zeros_like(),
            policy: self.policy.zeros_like(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.predictor.all_finite()
            && self.decay.all_finite()
            && self.policy.all_finite()
            && self.projection.matrices.iter().all(|m| linalg::all_finite(m.iter().copied()))
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedTensor> {
        let mut out = self.predictor.to_named("predictor.");
        out.extend(self.decay.to_named("decay."));
        out.extend(self.policy.to_named("policy."));
        for (m, w) in self.projection.matrices.iter().enumerate() {
            out.insert(
                format!("projection.{}", crate::domain::Modality::ALL[m].tag()),
                NamedTensor {
                    shape: vec![w.nrows(), w.ncols()],
                    data: w.iter().copied().collect(),
                },
            );
        }
        out
    }

    /// Overwrites every tensor from `tensors`; shapes must already match.
    pub fn load_named(&mut self, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
        self.predictor.load_named("predictor.", tensors)?;
        self.decay.load_named("decay.", tensors)?;
        self.policy.load_named("policy.", tensors)?;
        for (m, w) in self.projection.matrices.iter_mut().enumerate() {
            let key = format!("projection.{}", crate::domain::Modality::ALL[m].tag());
            let t = tensors.get(&key).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("checkpoint is missing tensor {key}"),
            })?;
            if t.shape != [w.nrows(), w.ncols()] {
                return Err(Error::Dimension {
                    what: "projection tensor",
                    expected: w.len(),
                    actual: t.data.len(),
                });
            }
            for (dst, src) in w.iter_mut().zip(&t.data) {
                *dst = *src;
            }
        }
        Ok(())
    }
}
