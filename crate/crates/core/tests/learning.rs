use acgm::attention::{decay_loss, DecayParams, LAMBDA_GT};
use acgm::domain::{Modality, ProjectedItem};
use acgm::env::{generate_episode, rollout, EdgeDecision, EnvConfig, RolloutOptions};
use acgm::learn::*;
use acgm::model::{stream_rng, Model, ModelShape};

fn model(seed: u64) -> Model {
    Model::init(ModelShape { d_raw: 32, d: 16, n_actions: 4 }, LAMBDA_GT, 0.1, seed)
}

#[test]
fn bce_at_one_half_is_ln_two() {
    let (loss, grad) = bce_logits(&[0.0; 5], &[1.0, 0.0, 1.0, 1.0, 0.0]);
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    assert!((grad[0] + 0.1).abs() < 1e-12 && (grad[1] - 0.1).abs() < 1e-12);
}

#[test]
fn bce_of_exact_prediction_is_near_zero() {
    let (loss, grad) = bce_logits(&[40.0, -40.0], &[1.0, 0.0]);
    assert!(loss < 1e-6);
    assert_eq!(grad, vec![0.0, 0.0]);
}

#[test]
fn edge_label_rule() {
    assert!(edge_label(2, 2, 0.7));
    assert!(!edge_label(2, 2, 0.5));
    assert!(!edge_label(1, 2, 0.95));
    assert!(!edge_label(2, 2, 0.6));
}

#[test]
fn edge_loss_errors() {
    let m = model(1);
    assert!(edge_loss(&m.predictor, &[]).is_err());
    let a = ProjectedItem::new(1, Modality::Text, vec![0.1; 16]);
    let b = ProjectedItem::new(2, Modality::Text, vec![0.2; 16]);
    let bad = LabeledPair { earlier: a, later: b, label: 0.5 };
    assert!(edge_loss(&m.predictor, &[bad]).is_err());
}

#[test]
fn ema_baseline_arithmetic() {
    assert!((update_baseline(0.0, 1.0, 0.99) - 0.01).abs() < 1e-15);
    let mut b = 0.0;
    for n in 1..=50 {
        b = update_baseline(b, 1.0, 0.99);
        assert!((b - (1.0 - 0.99f64.powi(n))).abs() < 1e-12);
    }
}

#[test]
fn centered_reward_gives_zero_phi_gradient() {
    let e = EdgeDecision {
        earlier: 1,
        later: 2,
        modality: Modality::Visual,
        p: 0.3,
        on: true,
    };
    assert_eq!(phi_surrogate(std::slice::from_ref(&e), 0.7, 0.7, 1.0), 0.0);
    assert!(phi_dlogits(&[e], 0.7, 0.7, 1.0).iter().all(|&g| g == 0.0));
}

#[test]
fn decay_loss_vanishes_at_ground_truth() {
    let mut p = DecayParams::zeros(4);
    p.lambda.assign(&ndarray::arr1(&LAMBDA_GT));
    assert_eq!(decay_loss(&p), 0.0);
    p.lambda[0] += 0.1;
    assert!((decay_loss(&p) - 0.01).abs() < 1e-15);
}

#[test]
fn baseline_reduces_gradient_norm_variance() {
    let env = EnvConfig::default();
    let m = model(17);
    let opts = RolloutOptions { explore: true, ..RolloutOptions::default() };
    let records: Vec<_> = (0..500u64)
        .map(|i| {
            let mut rng = stream_rng(17, 9, 4, i);
            let ep = generate_episode(&env, i, &mut rng);
            rollout(&m, &ep, &opts, &mut rng).unwrap()
        })
        .collect();
    let wins = records.iter().filter(|r| r.reward == 1.0).count();
    assert!(wins > 50 && wins < 450, "rewards are not mixed: {wins}");
    let v = phi_gradient_variance(&m.predictor, &records, 0.99);
    assert!(v.with_baseline < v.without_baseline, "{v:?}");
}

#[test]
fn zero_step_training_keeps_initialization() {
    let m = model(3);
    let cfg = TrainConfig { n1: 0, n2: 0, ..TrainConfig::default() };
    let mut state = TrainState::new(m.clone(), cfg.adam, 3);
    let mut rows = 0;
    train(&cfg, &mut state, None, &mut |_| rows += 1).unwrap();
    assert_eq!(rows, 0);
    assert_eq!(state.model.to_named(), m.to_named());
}

#[test]
fn metrics_rows_follow_the_schedule() {
    let m = model(5);
    let cfg = TrainConfig {
        n1: 3,
        n2: 2,
        stage1_pool: 8,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(m, cfg.adam, 5);
    let mut rows = Vec::new();
    train(&cfg, &mut state, None, &mut |r| rows.push(r.clone())).unwrap();
    let stages: Vec<_> = rows.iter().map(|r| (r.stage, r.step)).collect();
    assert_eq!(stages, vec![(1, 0), (1, 1), (1, 2), (2, 0), (2, 1)]);
    assert!(rows[0].loss_retrieval.is_none() && rows[0].success_rate.is_none());
    assert!(rows[3].loss_retrieval.is_some() && rows[3].success_rate.is_some());
    for r in &rows {
        assert_eq!(r.csv().split(',').count(), METRICS_HEADER.split(',').count());
    }
}
