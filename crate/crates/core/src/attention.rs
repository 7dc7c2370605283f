//! Modality-specific temporal-decay attention and fusion into the memory vector.
//!
//! For a query item `q` (time `t`) and a pool of same-modality neighbors:
//!
//! ```text
//! s_i     = (W_q q) . (W_k e_i) / sqrt(d)
//! alpha_i = softmax_i( s_i / tau - lambda_m * (t - t_i) )
//! m_t     = sum_m beta_m sum_i alpha_i^m e_i^m,   beta = softmax(beta_logits)
//! ```

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::domain::{Modality, ProjectedItem};
use crate::error::{Error, Result};
use crate::linalg::{self, dot};
use crate::params::{visit_matrix, visit_vector, Parameters};

/// Reference decay rates (visual, text, knowledge).
pub const LAMBDA_GT: [f64; 3] = [0.47, 0.11, 0.23];
pub const DEFAULT_TAU: f64 = 0.1;
pub const LAMBDA_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DecayParams {
    /// Decay rate per modality, indexed by `Modality::index`.
    pub lambda: Array1<f64>,
    pub lambda_gt: [f64; 3],
    pub beta_logits: Array1<f64>,
    pub tau: f64,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
}

impl DecayParams {
    pub fn zeros(d: usize) -> Self {
        DecayParams {
            lambda: Array1::zeros(3),
            lambda_gt: LAMBDA_GT,
            beta_logits: Array1::zeros(3),
            tau: DEFAULT_TAU,
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
        }
    }

    pub fn random<R: Rng + ?Sized>(d: usize, lambda_init: [f64; 3], tau: f64, rng: &mut R) -> Self {
        let limit = (6.0 / (2 * d) as f64).sqrt();
        DecayParams {
            lambda: Array1::from(lambda_init.to_vec()),
            lambda_gt: LAMBDA_GT,
            beta_logits: Array1::zeros(3),
            tau,
            wq: linalg::uniform_matrix(d, d, limit, rng),
            wk: linalg::uniform_matrix(d, d, limit, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.nrows()
    }

    /// Gradient container with the same shapes (constants copied, tensors zeroed).
    pub fn zeros_like(&self) -> Self {
        DecayParams {
            tau: self.tau,
            lambda_gt: self.lambda_gt,
            ..DecayParams::zeros(self.d())
        }
    }

    pub fn beta(&self) -> [f64; 3] {
        let b = linalg::softmax(self.beta_logits.as_slice().expect("contiguous"));
        [b[0], b[1], b[2]]
    }

    pub fn clamp_lambda(&mut self) {
        self.lambda.mapv_inplace(|l| l.clamp(0.0, LAMBDA_MAX));
    }

    pub fn add_scaled(&mut self, other: &DecayParams, alpha: f64) {
        self.lambda.scaled_add(alpha, &other.lambda);
        self.beta_logits.scaled_add(alpha, &other.beta_logits);
        self.wq.scaled_add(alpha, &other.wq);
        self.wk.scaled_add(alpha, &other.wk);
    }
}

impl Parameters for DecayParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64], bool)) {
        visit_vector(f, "lambda", &self.lambda, false);
        visit_vector(f, "beta_logits", &self.beta_logits, false);
        visit_matrix(f, "wq", &self.wq, true);
        visit_matrix(f, "wk", &self.wk, true);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("lambda", self.lambda.as_slice_mut().unwrap());
        f("beta_logits", self.beta_logits.as_slice_mut().unwrap());
        f("wq", self.wq.as_slice_mut().unwrap());
        f("wk", self.wk.as_slice_mut().unwrap());
    }
}

fn check_pool(query: &ProjectedItem, pool: &[ProjectedItem], d: usize) -> Result<()> {
    if query.e.len() != d {
        return Err(Error::Dimension {
            what: "attention query",
            expected: d,
            actual: query.e.len(),
        });
    }
    for it in pool {
        if it.t > query.t {
            return Err(Error::Contract(format!(
                "pool item at t={} is newer than the query at t={}",
                it.t, query.t
            )));
        }
        if it.e.len() != d {
            return Err(Error::Dimension {
                what: "attention pool item",
                expected: d,
                actual: it.e.len(),
            });
        }
    }
    Ok(())
}

/// Intermediate values of one modality's attention, kept for backward.
#[derive(Debug, Clone)]
struct PoolTrace {
    u: Vec<f64>,
    keys: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    context: Vec<f64>,
}

fn pool_forward(query: &ProjectedItem, pool: &[ProjectedItem], lambda: f64, params: &DecayParams) -> PoolTrace {
    let d = params.d();
    if pool.is_empty() {
        return PoolTrace {
            u: Vec::new(),
            keys: Vec::new(),
            alpha: Vec::new(),
            context: vec![0.0; d],
        };
    }
    let scale = (d as f64).sqrt();
    let u = params.wq.dot(&ArrayView1::from(&query.e[..])).to_vec();
    let keys: Vec<Vec<f64>> = pool
        .iter()
        .map(|it| params.wk.dot(&ArrayView1::from(&it.e[..])).to_vec())
        .collect();
    let logits: Vec<f64> = pool
        .iter()
        .zip(&keys)
        .map(|(it, k)| dot(&u, k) / scale / params.tau - lambda * (query.t - it.t) as f64)
        .collect();
    let alpha = linalg::softmax(&logits);
    let mut context = vec![0.0; d];
    for (a, it) in alpha.iter().zip(pool) {
        linalg::axpy(*a, &it.e, &mut context);
    }
    PoolTrace {
        u,
        keys,
        alpha,
        context,
    }
}

/// Attention weights of `query` over one modality's pool. Empty pool gives
/// an empty weight list.
pub fn attention_scores(query: &ProjectedItem, pool: &[ProjectedItem], params: &DecayParams) -> Result<Vec<f64>> {
    check_pool(query, pool, params.d())?;
    let m = pool.first().map_or(query.modality, |it| it.modality);
    if pool.iter().any(|it| it.modality != m) {
        return Err(Error::Contract("attention pool mixes modalities".into()));
    }
    Ok(pool_forward(query, pool, params.lambda[m.index()], params).alpha)
}

#[derive(Debug, Clone)]
pub struct MemoryVector {
    pub m: Vec<f64>,
    /// Per-modality attention weights, aligned with the pools passed to `fuse`.
    pub contributing_weights: [Vec<f64>; 3],
    pub beta: [f64; 3],
    traces: Vec<PoolTrace>,
}

impl MemoryVector {
    pub fn zeros(d: usize) -> Self {
        MemoryVector {
            m: vec![0.0; d],
            contributing_weights: Default::default(),
            beta: [0.0; 3],
            traces: Vec::new(),
        }
    }
}

/// Fuses per-modality pools (indexed by `Modality::index`) into `m_t`.
/// Empty pools contribute zero and `beta` is not renormalized.
pub fn fuse(queries: [&ProjectedItem; 3], pools: [&[ProjectedItem]; 3], params: &DecayParams) -> Result<MemoryVector> {
    let d = params.d();
    for m in Modality::ALL {
        check_pool(queries[m.index()], pools[m.index()], d)?;
    }
    let beta = params.beta();
    let mut out = vec![0.0; d];
    let mut traces = Vec::with_capacity(3);
    let mut weights: [Vec<f64>; 3] = Default::default();
    for m in Modality::ALL {
        let i = m.index();
        let trace = pool_forward(queries[i], pools[i], params.lambda[i], params);
        linalg::axpy(beta[i], &trace.context, &mut out);
        weights[i] = trace.alpha.clone();
        traces.push(trace);
    }
    Ok(MemoryVector {
        m: out,
        contributing_weights: weights,
        beta,
        traces,
    })
}

/// Gradients of a scalar loss through `fuse`, given `dL/dm`.
#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub params: DecayParams,
    /// dL/d(query embedding) per modality.
    pub queries: [Vec<f64>; 3],
    /// dL/d(pool item embedding) per modality, aligned with the pools.
    pub pools: [Vec<Vec<f64>>; 3],
}

pub fn fuse_backward(
    queries: [&ProjectedItem; 3],
    pools: [&[ProjectedItem]; 3],
    params: &DecayParams,
    fwd: &MemoryVector,
    dm: &[f64],
) -> FuseGrads {
    let d = params.d();
    let scale = (d as f64).sqrt();
    let mut g = params.zeros_like();
    let mut dq: [Vec<f64>; 3] = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut dpool: [Vec<Vec<f64>>; 3] = Default::default();
    if fwd.traces.len() != 3 {
        // produced by `MemoryVector::zeros`: m does not depend on the parameters
        for m in Modality::ALL {
            dpool[m.index()] = vec![vec![0.0; d]; pools[m.index()].len()];
        }
        return FuseGrads {
            params: g,
            queries: dq,
            pools: dpool,
        };
    }

    let beta = fwd.beta;
    let dbeta: Vec<f64> = fwd.traces.iter().map(|tr| dot(dm, &tr.context)).collect();
    let mean: f64 = (0..3).map(|i| beta[i] * dbeta[i]).sum();
    for i in 0..3 {
        g.beta_logits[i] = beta[i] * (dbeta[i] - mean);
    }

    for m in Modality::ALL {
        let i = m.index();
        let pool = pools[i];
        let tr = &fwd.traces[i];
        let mut dpi = vec![vec![0.0; d]; pool.len()];
        if pool.is_empty() {
            dpool[i] = dpi;
            continue;
        }
        // dc = beta_m dm; alpha enters via c = sum alpha_i e_i
        let dalpha: Vec<f64> = pool.iter().map(|it| beta[i] * dot(dm, &it.e)).collect();
        for (k, a) in tr.alpha.iter().enumerate() {
            linalg::axpy(beta[i] * a, dm, &mut dpi[k]);
        }
        let avg: f64 = tr.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
        let dlogit: Vec<f64> = tr.alpha.iter().zip(&dalpha).map(|(a, da)| a * (da - avg)).collect();

        let query = queries[i];
        let mut du = vec![0.0; d];
        for (k, it) in pool.iter().enumerate() {
            g.lambda[i] -= dlogit[k] * (query.t - it.t) as f64;
            let ds = dlogit[k] / params.tau / scale;
            // s = u . key
            linalg::axpy(ds, &tr.keys[k], &mut du);
            let dkey: Vec<f64> = tr.u.iter().map(|x| ds * x).collect();
            // key = W_k e
            for r in 0..d {
                if dkey[r] == 0.0 {
                    continue;
                }
                let mut row = g.wk.row_mut(r);
                for (c, x) in row.iter_mut().enumerate() {
                    *x += dkey[r] * it.e[c];
                }
            }
            let back = params.wk.t().dot(&ArrayView1::from(&dkey[..]));
            linalg::axpy(1.0, back.as_slice().unwrap(), &mut dpi[k]);
        }
        // u = W_q q
        for r in 0..d {
            let mut row = g.wq.row_mut(r);
            for (c, x) in row.iter_mut().enumerate() {
                *x += du[r] * query.e[c];
            }
        }
        let back = params.wq.t().dot(&ArrayView1::from(&du[..]));
        linalg::axpy(1.0, back.as_slice().unwrap(), &mut dq[i]);
        dpool[i] = dpi;
    }
    FuseGrads {
        params: g,
        queries: dq,
        pools: dpool,
    }
}

/// `sum_m (lambda_m - lambda_m^gt)^2`.
pub fn decay_loss(params: &DecayParams) -> f64 {
    params
        .lambda
        .iter()
        .zip(params.lambda_gt)
        .map(|(l, g)| (l - g).powi(2))
        .sum()
}

/// Gradient of `decay_loss` with respect to `lambda`.
pub fn decay_loss_grad(params: &DecayParams) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, (l, g)) in params.lambda.iter().zip(params.lambda_gt).enumerate() {
        out[i] = 2.0 * (l - g);
    }
    out
}
