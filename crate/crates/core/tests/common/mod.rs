//! Checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use acgm::attention::{decay_loss, decay_loss_grad, fuse, fuse_backward, DecayParams};
use acgm::domain::{Modality, ProjectedItem};
use acgm::env::{generate_episode, policy_input, rollout, EdgeDecision, EnvConfig, PolicyParams, RolloutOptions};
use acgm::graph::{edge_probabilities, PredictorParams};
use acgm::learn::{edge_loss, grad_check, grad_check_coords, phi_episode_gradient, phi_surrogate, LabeledPair};
use acgm::model::{stream_rng, Model, ModelShape};
use acgm::params::Parameters;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CONFIGS: u64 = 20;

fn rng(i: u64) -> ChaCha8Rng {
    stream_rng(2024, 9, 0, i)
}

fn gaussian(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect()
}

fn item(t: usize, m: Modality, d: usize, rng: &mut ChaCha8Rng) -> ProjectedItem {
    ProjectedItem::new(t, m, gaussian(d, 1.0, rng))
}

/// A few coordinates inside every tensor of `p`.
fn sample_coords(p: &dyn Parameters, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    p.visit(&mut |_, _, data, _| {
        for _ in 0..per_tensor.min(data.len()) {
            out.push(offset + rng.random_range(0..data.len()));
        }
        offset += data.len();
    });
    out.sort_unstable();
    out.dedup();
    out
}

fn with_flat<P: Parameters + Clone>(p: &P, flat: &[f64]) -> P {
    let mut q = p.clone();
    q.assign_flat(flat);
    q
}

/// Relative error per configuration.
pub fn edge_loss_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for c in 0..CONFIGS {
        let mut r = rng(c);
        let d = 4 + (c as usize % 3);
        let params = PredictorParams::random(d, &mut r);
        let n = 2 + r.random_range(0..5);
        let pairs: Vec<LabeledPair> = (0..n)
            .map(|i| {
                let m = Modality::from_index(i % 3).unwrap();
                LabeledPair {
                    earlier: item(1 + i, m, d, &mut r),
                    later: item(10 + i, m, d, &mut r),
                    label: f64::from(r.random_range(0..2u8)),
                }
            })
            .collect();
        let (_, grad) = edge_loss(&params, &pairs).unwrap();
        let x = params.flatten();
        let coords = sample_coords(&params, 6, &mut r);
        let err = grad_check_coords(
            &mut |flat| edge_loss(&with_flat(&params, flat), &pairs).unwrap().0,
            &x,
            &grad.flatten(),
            &coords,
            H,
        );
        errs.push(err);
    }
    errs
}

pub fn decay_loss_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for c in 0..CONFIGS {
        let mut r = rng(100 + c);
        let mut params = DecayParams::zeros(2);
        for l in params.lambda.iter_mut() {
            *l = r.random_range(0.0..2.0);
        }
        let lambda: Vec<f64> = params.lambda.to_vec();
        let err = grad_check(
            &mut |x| {
                let mut p = params.clone();
                p.lambda.assign(&ndarray::ArrayView1::from(x));
                (decay_loss(&p), decay_loss_grad(&p).to_vec())
            },
            &lambda,
            H,
        );
        errs.push(err);
    }
    errs
}

struct FuseCase {
    queries: [ProjectedItem; 3],
    pools: [Vec<ProjectedItem>; 3],
    params: DecayParams,
}

fn fuse_case(c: u64) -> FuseCase {
    let mut r = rng(200 + c);
    let d = 3 + (c as usize % 4);
    let t_q = 12;
    let queries = Modality::ALL.map(|m| item(t_q, m, d, &mut r));
    let pools = Modality::ALL.map(|m| {
        let n = r.random_range(0..5);
        (0..n).map(|_| item(r.random_range(1..=t_q), m, d, &mut r)).collect::<Vec<_>>()
    });
    let mut params = DecayParams::random(d, [0.47, 0.11, 0.23], 0.5, &mut r);
    for (b, z) in params.beta_logits.iter_mut().zip(gaussian(3, 0.5, &mut r)) {
        *b = z;
    }
    FuseCase { queries, pools, params }
}

impl FuseCase {
    fn memory(&self, params: &DecayParams) -> acgm::attention::MemoryVector {
        let [q0, q1, q2] = &self.queries;
        let [p0, p1, p2] = &self.pools;
        fuse([q0, q1, q2], [p0, p1, p2], params).unwrap()
    }

    fn backward(&self, fwd: &acgm::attention::MemoryVector, dm: &[f64]) -> DecayParams {
        let [q0, q1, q2] = &self.queries;
        let [p0, p1, p2] = &self.pools;
        fuse_backward([q0, q1, q2], [p0, p1, p2], &self.params, fwd, dm).params
    }
}

pub fn fuse_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for c in 0..CONFIGS {
        let case = fuse_case(c);
        let d = case.params.d();
        let mut r = rng(300 + c);
        let weights = gaussian(d, 1.0, &mut r);
        let fwd = case.memory(&case.params);
        let grad = case.backward(&fwd, &weights);
        let x = case.params.flatten();
        let coords: Vec<usize> = (0..x.len()).collect();
        let err = grad_check_coords(
            &mut |flat| {
                let m = case.memory(&with_flat(&case.params, flat)).m;
                m.iter().zip(&weights).map(|(a, b)| a * b).sum()
            },
            &x,
            &grad.flatten(),
            &coords,
            H,
        );
        errs.push(err);
    }
    errs
}

/// Parameter and input errors, two entries per configuration.
pub fn log_policy_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for c in 0..CONFIGS {
        let mut r = rng(400 + c);
        let d = 3 + (c as usize % 3);
        let n_actions = 2 + (c as usize % 4);
        let mut policy = PolicyParams::random(d, n_actions, &mut r);
        let w2 = gaussian(policy.l2.w.len(), 0.3, &mut r);
        policy.l2.w.iter_mut().zip(w2).for_each(|(w, z)| *w = z);
        let input = gaussian(2 * d, 1.0, &mut r);
        let a = r.random_range(0..n_actions);
        let fwd = policy.forward(&input);
        let (grad, dinput) = policy.backward_log_prob(&input, &fwd, a, 1.0);
        let log_pi = |p: &PolicyParams, x: &[f64]| p.forward(x).probs[a].ln();

        let x = policy.flatten();
        let coords = sample_coords(&policy, 12, &mut r);
        let err = grad_check_coords(&mut |flat| log_pi(&with_flat(&policy, flat), &input), &x, &grad.flatten(), &coords, H);
        errs.push(err);

        let all: Vec<usize> = (0..input.len()).collect();
        let err = grad_check_coords(&mut |xi| log_pi(&policy, xi), &input, &dinput, &all, H);
        errs.push(err);
    }
    errs
}

/// Gradient of log pi with respect to the decay parameters through m_t.
pub fn policy_through_memory_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    for c in 0..CONFIGS {
        let case = fuse_case(500 + c);
        let d = case.params.d();
        let mut r = rng(600 + c);
        let mut policy = PolicyParams::random(d, 3, &mut r);
        let w2 = gaussian(policy.l2.w.len(), 0.3, &mut r);
        policy.l2.w.iter_mut().zip(w2).for_each(|(w, z)| *w = z);
        let a = c as usize % 3;
        let objective = |params: &DecayParams| {
            let mem = case.memory(params);
            let input = policy_input(&case.queries, &mem.m);
            (policy.forward(&input).probs[a].ln(), input, mem)
        };
        let (_, input, mem) = objective(&case.params);
        let fwd = policy.forward(&input);
        let (_, dinput) = policy.backward_log_prob(&input, &fwd, a, 1.0);
        let grad = case.backward(&mem, &dinput[d..]);
        let x = case.params.flatten();
        let coords: Vec<usize> = (0..x.len()).collect();
        let err = grad_check_coords(&mut |flat| objective(&with_flat(&case.params, flat)).0, &x, &grad.flatten(), &coords, H);
        errs.push(err);
    }
    errs
}

pub fn reinforce_surrogate_errors() -> Vec<f64> {
    let mut errs = Vec::new();
    let env = EnvConfig {
        horizon: 6,
        ..EnvConfig::default()
    };
    for c in 0..CONFIGS {
        let mut r = rng(700 + c);
        let model = Model::init(
            ModelShape {
                d_raw: env.d_raw,
                d: 4,
                n_actions: env.n_actions,
            },
            [0.47, 0.11, 0.23],
            0.1,
            800 + c,
        );
        let ep = generate_episode(&env, c, &mut r);
        let opts = RolloutOptions {
            explore: true,
            ..RolloutOptions::default()
        };
        let rec = rollout(&model, &ep, &opts, &mut r).unwrap();
        let reward = f64::from(r.random_range(0..2u8));
        let baseline = r.random_range(0.0..1.0);
        let rec = acgm::env::RolloutRecord { reward, ..rec };
        let grad = phi_episode_gradient(&model.predictor, &rec, baseline).expect("decisions were made");
        let pairs: Vec<(&ProjectedItem, &ProjectedItem)> = rec
            .edges
            .iter()
            .map(|e| {
                let m = e.modality.index();
                (&rec.items[e.earlier - 1][m], &rec.items[e.later - 1][m])
            })
            .collect();
        let surrogate = |p: &PredictorParams| {
            let probs = edge_probabilities(p, &pairs);
            let edges: Vec<EdgeDecision> = rec.edges.iter().zip(probs).map(|(e, p)| EdgeDecision { p, ..e.clone() }).collect();
            phi_surrogate(&edges, reward, baseline, 1.0)
        };
        let x = model.predictor.flatten();
        let coords = sample_coords(&model.predictor, 6, &mut r);
        let err = grad_check_coords(&mut |flat| surrogate(&with_flat(&model.predictor, flat)), &x, &grad.flatten(), &coords, H);
        errs.push(err);
    }
    errs
}


/// Compares hierarchical retrieval with the exhaustive scan at every step
/// of `n` random episodes of length at most 20; returns (comparisons,
/// mismatches).
pub fn short_history_mismatches(n: u64) -> (usize, usize) {
    use acgm::index::{retrieve_exact, IndexConfig, MemoryIndex, ScoredItem};
    let keys = |r: &[ScoredItem]| r.iter().map(|s| (s.item.t, s.item.modality, s.score.to_bits())).collect::<Vec<_>>();
    let model = Model::init(ModelShape { d_raw: 32, d: 16, n_actions: 4 }, [0.47, 0.11, 0.23], 0.1, 3);
    let (mut compared, mut mismatched) = (0, 0);
    for e in 0..n {
        let mut rng = stream_rng(11, 9, 1, e);
        let env = EnvConfig {
            horizon: rng.random_range(6..=20),
            ..EnvConfig::default()
        };
        let ep = generate_episode(&env, e, &mut rng);
        let items = model.projection.project_episode(&ep).unwrap();
        let k = rng.random_range(1..=12);
        for m in Modality::ALL {
            let mut index = MemoryIndex::new(IndexConfig { seed: e, ..IndexConfig::default() });
            let mut seen: Vec<ProjectedItem> = Vec::new();
            for step in &items {
                let q = &step[m.index()];
                if !seen.is_empty() {
                    let hier = index.retrieve(q, k).unwrap();
                    compared += 1;
                    if keys(&hier.items) != keys(&retrieve_exact(&seen, q, k)) {
                        mismatched += 1;
                    }
                }
                index.insert(q.clone()).unwrap();
                seen.push(q.clone());
            }
        }
    }
    (compared, mismatched)
}
