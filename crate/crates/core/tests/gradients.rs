//! Analytic gradients against central finite differences.

mod common;

use std::time::{Duration, Instant};

use common::{CONFIGS, TOL};

fn check(name: &str, errs: Vec<f64>, per_config: usize) {
    assert_eq!(errs.len(), per_config * CONFIGS as usize, "{name}");
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name} check {i}: relative error {e:e}");
    }
}

#[test]
fn edge_loss_gradients() {
    check("edge_loss", common::edge_loss_errors(), 1);
}

#[test]
fn decay_loss_gradients() {
    check("decay_loss", common::decay_loss_errors(), 1);
}

#[test]
fn fuse_gradients() {
    check("fuse", common::fuse_errors(), 1);
}

#[test]
fn log_policy_gradients() {
    check("log pi", common::log_policy_errors(), 2);
}

#[test]
fn log_policy_gradients_reach_decay_parameters() {
    check("log pi through m", common::policy_through_memory_errors(), 1);
}

#[test]
fn reinforce_surrogate_gradients() {
    check("reinforce", common::reinforce_surrogate_errors(), 1);
}

#[test]
fn whole_suite_is_fast() {
    let start = Instant::now();
    common::edge_loss_errors();
    common::reinforce_surrogate_errors();
    assert!(start.elapsed() < Duration::from_secs(60));
}
