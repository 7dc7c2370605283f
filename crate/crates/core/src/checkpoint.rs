//! JSON checkpoints: config echo, named tensors, optimizer moments and
//! schedule counters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learn::{AdamW, MomentState, TrainState};
use crate::model::Model;
use crate::params::NamedTensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// All randomness is derived from the run seed and the schedule position,
/// so the generator needs no further state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub scheme: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub tensors: BTreeMap<String, NamedTensor>,
    pub moments: BTreeMap<String, MomentState>,
    pub baseline: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_state(config: &RunConfig, state: &TrainState) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: config.clone(),
            tensors: state.model.to_named(),
            moments: state.optimizer.moments.clone(),
            baseline: state.baseline,
            stage1_steps: state.stage1_steps,
            stage2_steps: state.stage2_steps,
            rng: RngState {
                scheme: "chacha8-stream".into(),
                seed: state.seed,
            },
        }
    }

    pub fn into_state(self) -> Result<(RunConfig, TrainState)> {
        self.config.validate()?;
        let cfg = &self.config;
        let mut model = Model::init(cfg.model_shape(), cfg.initial_lambda(), cfg.attention.tau, cfg.seed);
        model.load_named(&self.tensors)?;
        let mut optimizer = AdamW::new(cfg.adam());
        optimizer.moments = self.moments;
        let state = TrainState {
            model,
            baseline: self.baseline,
            optimizer,
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            seed: self.rng.seed,
        };
        state.check()?;
        Ok((self.config, state))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: "checkpoint has no format_version".into(),
            })?;
        if found != u64::from(CHECKPOINT_FORMAT_VERSION) {
            return Err(Error::Version {
                found: found as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.d = 8;
        cfg.train.n1 = 3;
        cfg.train.n2 = 2;
        cfg.train.stage1_pool = 4;
        cfg
    }

    fn init_state(cfg: &RunConfig) -> TrainState {
        let model = Model::init(cfg.model_shape(), cfg.initial_lambda(), cfg.attention.tau, cfg.seed);
        TrainState::new(model, cfg.adam(), cfg.seed)
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small_config();
        let mut state = init_state(&cfg);
        crate::learn::train(&cfg.train_config(), &mut state, None, &mut |_| {}).unwrap();
        let ck = Checkpoint::from_state(&cfg, &state);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let (cfg2, state2) = back.into_state().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(state2, state);
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let cfg = small_config();
        let ck = Checkpoint::from_state(&cfg, &init_state(&cfg));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let err = Checkpoint::load(&dir.path().join("absent.json")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = small_config();
        let mut ck = Checkpoint::from_state(&cfg, &init_state(&cfg));
        ck.format_version = 9;
        let err = Checkpoint::from_json(&ck.to_json()).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let cfg = small_config();
        let mut ck = Checkpoint::from_state(&cfg, &init_state(&cfg));
        ck.tensors.remove("decay.wq");
        let err = ck.into_state().unwrap_err();
        assert!(err.to_string().contains("decay.wq"), "{err}");
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = small_config();
        let tc = cfg.train_config();
        let mut full = init_state(&cfg);
        let mut rows_full = Vec::new();
        crate::learn::train(&tc, &mut full, None, &mut |r| rows_full.push(r.csv())).unwrap();

        let mut partial = init_state(&cfg);
        let mut rows = Vec::new();
        let mut early = tc.clone();
        early.n2 = 1;
        crate::learn::train(&early, &mut partial, None, &mut |r| rows.push(r.csv())).unwrap();
        let json = Checkpoint::from_state(&cfg, &partial).to_json();
        let (_, mut resumed) = Checkpoint::from_json(&json).unwrap().into_state().unwrap();
        crate::learn::train(&tc, &mut resumed, None, &mut |r| rows.push(r.csv())).unwrap();
        assert_eq!(rows, rows_full);
        assert_eq!(resumed, full);
    }
}
