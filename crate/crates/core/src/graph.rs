//! Pairwise edge features, the relevance predictor and thresholded graph
//! construction over (timestep, modality) memory items.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::domain::{Modality, ProjectedItem};
use crate::error::{Error, Result};
use crate::linalg::{self, cosine, sigmoid};
use crate::params::{relu_inplace, Dense, Parameters};

pub const EDGE_FEATURE_DIM: usize = 9;
/// Hidden widths of the relevance predictor.
pub const PREDICTOR_HIDDEN: [usize; 2] = [512, 256];
/// Temporal distances enter the features scaled by this factor.
pub const DT_SCALE: f64 = 1.0 / 100.0;
pub const EDGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeatures {
    pub dt: f64,
    pub cos: f64,
    pub same_mod: f64,
    pub mod_i: [f64; 3],
    pub mod_j: [f64; 3],
}

impl EdgeFeatures {
    pub fn to_array(&self) -> [f64; EDGE_FEATURE_DIM] {
        let mut out = [0.0; EDGE_FEATURE_DIM];
        out[0] = self.dt;
        out[1] = self.cos;
        out[2] = self.same_mod;
        out[3..6].copy_from_slice(&self.mod_i);
        out[6..9].copy_from_slice(&self.mod_j);
        out
    }
}

fn one_hot(m: Modality) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[m.index()] = 1.0;
    v
}

pub fn edge_features(a: &ProjectedItem, b: &ProjectedItem) -> EdgeFeatures {
    EdgeFeatures {
        dt: a.t.abs_diff(b.t) as f64 * DT_SCALE,
        cos: cosine(&a.e, &b.e),
        same_mod: if a.modality == b.modality { 1.0 } else { 0.0 },
        mod_i: one_hot(a.modality),
        mod_j: one_hot(b.modality),
    }
}

/// `g_phi`: (2d + 9) -> 512 -> 256 -> 1 with ReLU after the hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
}

impl PredictorParams {
    pub fn input_dim_for(d: usize) -> usize {
        2 * d + EDGE_FEATURE_DIM
    }

    pub fn zeros(d: usize) -> Self {
        let input = Self::input_dim_for(d);
        PredictorParams {
            l1: Dense::zeros(input, PREDICTOR_HIDDEN[0]),
            l2: Dense::zeros(PREDICTOR_HIDDEN[0], PREDICTOR_HIDDEN[1]),
            l3: Dense::zeros(PREDICTOR_HIDDEN[1], 1),
        }
    }

    /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d);
        let input = p.l1.input_dim();
        p.l1.w = linalg::uniform_matrix(PREDICTOR_HIDDEN[0], input, (6.0 / input as f64).sqrt(), rng);
        p.l2.w = linalg::uniform_matrix(
            PREDICTOR_HIDDEN[1],
            PREDICTOR_HIDDEN[0],
            (6.0 / PREDICTOR_HIDDEN[0] as f64).sqrt(),
            rng,
        );
        p.l3.w = linalg::uniform_matrix(1, PREDICTOR_HIDDEN[1], linalg::glorot_limit(PREDICTOR_HIDDEN[1], 1), rng);
        p
    }

    pub fn d(&self) -> usize {
        (self.l1.input_dim() - EDGE_FEATURE_DIM) / 2
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d())
    }

    pub fn add_scaled(&mut self, other: &PredictorParams, alpha: f64) {
        self.l1.add_scaled(&other.l1, alpha);
        self.l2.add_scaled(&other.l2, alpha);
        self.l3.add_scaled(&other.l3, alpha);
    }

    /// Forward pass over a batch of input rows, keeping activations for backward.
    pub fn forward_batch(&self, x: Array2<f64>) -> (Array1<f64>, PredictorCache) {
        let mut h1 = self.l1.forward_batch(&x);
        relu_inplace(&mut h1);
        let mut h2 = self.l2.forward_batch(&h1);
        relu_inplace(&mut h2);
        let logits = self.l3.forward_batch(&h2).column(0).to_owned();
        (logits, PredictorCache { x, h1, h2 })
    }

    pub fn logits(&self, x: Array2<f64>) -> Array1<f64> {
        self.forward_batch(x).0
    }

    /// Backpropagates `dlogits` (one entry per row); returns parameter
    /// gradients and, if requested, gradients with respect to the input rows.
    pub fn backward_batch(
        &self,
        cache: &PredictorCache,
        dlogits: &Array1<f64>,
        want_input_grad: bool,
    ) -> (PredictorParams, Option<Array2<f64>>) {
        let mut g = self.zeros_like();
        let n = cache.x.nrows();
        debug_assert_eq!(dlogits.len(), n);
        let dout = dlogits.view().insert_axis(Axis(1)); // n x 1
        g.l3.w = dout.t().dot(&cache.h2);
        g.l3.b = Array1::from_elem(1, dlogits.sum());

        let mut dh2 = dout.dot(&self.l3.w); // n x 256
        ndarray::Zip::from(&mut dh2)
            .and(&cache.h2)
            .for_each(|g, &h| if h <= 0.0 { *g = 0.0 });
        g.l2.w = dh2.t().dot(&cache.h1);
        g.l2.b = dh2.sum_axis(Axis(0));

        let mut dh1 = dh2.dot(&self.l2.w); // n x 512
        ndarray::Zip::from(&mut dh1)
            .and(&cache.h1)
            .for_each(|g, &h| if h <= 0.0 { *g = 0.0 });
        g.l1.w = dh1.t().dot(&cache.x);
        g.l1.b = dh1.sum_axis(Axis(0));

        let dx = want_input_grad.then(|| dh1.dot(&self.l1.w));
        (g, dx)
    }
}

impl Parameters for PredictorParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64], bool)) {
        self.l1.visit("l1", f);
        self.l2.visit("l2", f);
        self.l3.visit("l3", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut("l1", f);
        self.l2.visit_mut("l2", f);
        self.l3.visit_mut("l3", f);
    }
}

#[derive(Debug, Clone)]
pub struct PredictorCache {
    pub x: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
}

/// Writes `e_i ⊕ e_j ⊕ f` into `row`.
pub fn write_pair_input(row: &mut [f64], a: &ProjectedItem, b: &ProjectedItem) {
    let d = a.e.len();
    row[..d].copy_from_slice(&a.e);
    row[d..2 * d].copy_from_slice(&b.e);
    row[2 * d..].copy_from_slice(&edge_features(a, b).to_array());
}

/// Stacks predictor inputs for a list of item pairs.
pub fn pair_inputs<'a>(
    d: usize,
    pairs: impl ExactSizeIterator<Item = (&'a ProjectedItem, &'a ProjectedItem)>,
) -> Array2<f64> {
    let mut x = Array2::zeros((pairs.len(), PredictorParams::input_dim_for(d)));
    for (mut row, (a, b)) in x.rows_mut().into_iter().zip(pairs) {
        write_pair_input(row.as_slice_mut().expect("row-major"), a, b);
    }
    x
}

fn check_pair_shapes(params: &PredictorParams, a: &ProjectedItem, b: &ProjectedItem) -> Result<()> {
    let d = params.d();
    for e in [&a.e, &b.e] {
        if e.len() != d {
            return Err(Error::Dimension {
                what: "predictor embedding",
                expected: d,
                actual: e.len(),
            });
        }
    }
    Ok(())
}

/// `sigma(g_phi(e_i ⊕ e_j ⊕ f))` for a single pair.
pub fn edge_probability(params: &PredictorParams, a: &ProjectedItem, b: &ProjectedItem) -> Result<f64> {
    check_pair_shapes(params, a, b)?;
    let x = pair_inputs(params.d(), std::iter::once((a, b)));
    Ok(sigmoid(params.logits(x)[0]))
}

/// Edge probabilities for many pairs in one batched pass.
pub fn edge_probabilities(params: &PredictorParams, pairs: &[(&ProjectedItem, &ProjectedItem)]) -> Vec<f64> {
    if pairs.is_empty() {
        return Vec::new();
    }
    let x = pair_inputs(params.d(), pairs.iter().copied());
    params.logits(x).iter().map(|&z| sigmoid(z)).collect()
}

/// Symmetric sparse graph over one episode's memory items.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceGraph {
    nodes: Vec<ProjectedItem>,
    adjacency: Vec<Vec<usize>>,
    /// `(i, j, p)` with `i < j`, in insertion order.
    edges: Vec<(usize, usize, f64)>,
}

impl RelevanceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a node; nodes must arrive in (t, modality) order.
    pub fn add_node(&mut self, item: ProjectedItem) -> Result<usize> {
        if let Some(last) = self.nodes.last() {
            if item.key() <= last.key() {
                return Err(Error::Contract(format!(
                    "graph node ({}, {}) does not follow ({}, {})",
                    item.t, item.modality, last.t, last.modality
                )));
            }
        }
        self.nodes.push(item);
        self.adjacency.push(Vec::new());
        Ok(self.nodes.len() - 1)
    }

    pub fn add_edge(&mut self, a: usize, b: usize, p: f64) {
        assert!(a != b, "self-loops are not allowed");
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        if let Err(pos) = self.adjacency[i].binary_search(&j) {
            self.adjacency[i].insert(pos, j);
            let pos = self.adjacency[j].binary_search(&i).unwrap_err();
            self.adjacency[j].insert(pos, i);
            self.edges.push((i, j, p));
        }
    }

    pub fn nodes(&self) -> &[ProjectedItem] {
        &self.nodes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(i, j, p)` with `i < j`, sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize, f64)> {
        let mut e = self.edges.clone();
        e.sort_by_key(|&(i, j, _)| (i, j));
        e
    }

    /// Builds a graph keeping the pairs for which `keep(i, j)` returns a score.
    pub fn from_scores(
        mut items: Vec<ProjectedItem>,
        mut score: impl FnMut(&[(&ProjectedItem, &ProjectedItem)]) -> Vec<Option<f64>>,
    ) -> Result<Self> {
        items.sort_by_key(|it| it.key());
        let mut g = RelevanceGraph::new();
        for item in items {
            g.add_node(item)?;
        }
        let n = g.nodes.len();
        let mut idx = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                idx.push((i, j));
            }
        }
        let pairs: Vec<(&ProjectedItem, &ProjectedItem)> =
            idx.iter().map(|&(i, j)| (&g.nodes[i], &g.nodes[j])).collect();
        let scores = score(&pairs);
        drop(pairs);
        for (&(i, j), s) in idx.iter().zip(scores) {
            if let Some(p) = s {
                g.add_edge(i, j, p);
            }
        }
        Ok(g)
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, j, p) in self.edge_list() {
            let (a, b) = (&self.nodes[i], &self.nodes[j]);
            let _ = writeln!(out, "{} {} {} {} {:.6}", a.t, a.modality, b.t, b.modality, p);
        }
        out
    }
}

/// Learned graph: edge iff `p > threshold` (strict).
pub fn build_graph(items: Vec<ProjectedItem>, params: &PredictorParams, threshold: f64) -> Result<RelevanceGraph> {
    if items.is_empty() {
        return Err(Error::Empty("build_graph needs at least one item"));
    }
    if let Some(bad) = items.iter().find(|it| it.e.len() != params.d()) {
        return Err(Error::Dimension {
            what: "graph item embedding",
            expected: params.d(),
            actual: bad.e.len(),
        });
    }
    RelevanceGraph::from_scores(items, |pairs| {
        edge_probabilities(params, pairs)
            .into_iter()
            .map(|p| (p > threshold).then_some(p))
            .collect()
    })
}

/// Fixed-similarity baseline: edge iff `cos > tau`.
pub fn build_cosine_graph(items: Vec<ProjectedItem>, tau: f64) -> Result<RelevanceGraph> {
    RelevanceGraph::from_scores(items, |pairs| {
        pairs
            .iter()
            .map(|(a, b)| {
                let c = cosine(&a.e, &b.e);
                (c > tau).then_some(c)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityStats {
    pub edges_per_node: f64,
    /// `degree_histogram[k]` = number of nodes with degree k.
    pub degree_histogram: Vec<usize>,
}

pub fn sparsity_stats(graph: &RelevanceGraph) -> SparsityStats {
    let n = graph.num_nodes();
    if n == 0 {
        return SparsityStats {
            edges_per_node: 0.0,
            degree_histogram: Vec::new(),
        };
    }
    let max_deg = (0..n).map(|i| graph.neighbors(i).len()).max().unwrap_or(0);
    let mut hist = vec![0; max_deg + 1];
    for i in 0..n {
        hist[graph.neighbors(i).len()] += 1;
    }
    SparsityStats {
        edges_per_node: 2.0 * graph.num_edges() as f64 / n as f64,
        degree_histogram: hist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(t: usize, m: Modality, e: Vec<f64>) -> ProjectedItem {
        ProjectedItem::new(t, m, e)
    }

    /// Scalar-loop reference for `g_phi`, independent of the batched path.
    fn reference_logit(p: &PredictorParams, x: &[f64]) -> f64 {
        let layer = |l: &Dense, x: &[f64], relu: bool| -> Vec<f64> {
            (0..l.output_dim())
                .map(|r| {
                    let mut acc = l.b[r];
                    for c in 0..l.input_dim() {
                        acc += l.w[[r, c]] * x[c];
                    }
                    if relu {
                        acc.max(0.0)
                    } else {
                        acc
                    }
                })
                .collect()
        };
        let h1 = layer(&p.l1, x, true);
        let h2 = layer(&p.l2, &h1, true);
        layer(&p.l3, &h2, false)[0]
    }

    fn reference_graph(items: &[ProjectedItem], p: &PredictorParams) -> Vec<(usize, usize)> {
        let mut sorted = items.to_vec();
        sorted.sort_by_key(|it| it.key());
        let mut out = Vec::new();
        for i in 0..sorted.len() {
            for j in (i + 1)..sorted.len() {
                let mut row = vec![0.0; PredictorParams::input_dim_for(p.d())];
                write_pair_input(&mut row, &sorted[i], &sorted[j]);
                if sigmoid(reference_logit(p, &row)) > 0.5 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn random_items(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<ProjectedItem> {
        (0..n)
            .map(|i| {
                let e = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                item(i / 3 + 1, Modality::ALL[i % 3], e)
            })
            .collect()
    }

    #[test]
    fn identical_items_features() {
        let a = item(4, Modality::Visual, vec![1.0, 2.0]);
        let f = edge_features(&a, &a.clone());
        assert_eq!(f.dt, 0.0);
        assert!((f.cos - 1.0).abs() < 1e-12);
        assert_eq!(f.same_mod, 1.0);
    }

    #[test]
    fn orthogonal_cross_modal_features() {
        let a = item(10, Modality::Visual, vec![1.0, 0.0]);
        let b = item(60, Modality::Text, vec![0.0, 3.0]);
        let f = edge_features(&a, &b);
        assert!((f.dt - 0.5).abs() < 1e-12);
        assert_eq!(f.cos, 0.0);
        assert_eq!(f.same_mod, 0.0);
        assert_eq!(f.mod_i, [1.0, 0.0, 0.0]);
        assert_eq!(f.mod_j, [0.0, 1.0, 0.0]);
        let rev = edge_features(&b, &a);
        assert_eq!(rev.mod_i, f.mod_j);
        assert_eq!(rev.dt, f.dt);
    }

    #[test]
    fn antiparallel_cosine() {
        let a = item(1, Modality::Knowledge, vec![0.3, -0.2, 0.9]);
        let b = item(2, Modality::Knowledge, vec![-0.3, 0.2, -0.9]);
        assert!((edge_features(&a, &b).cos + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_cosine_is_zero() {
        let a = item(1, Modality::Visual, vec![0.0, 0.0]);
        let b = item(2, Modality::Visual, vec![1.0, 0.0]);
        assert_eq!(edge_features(&a, &b).cos, 0.0);
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PredictorParams::random(4, &mut rng);
        p.l3 = p.l3.zeros_like();
        let a = item(1, Modality::Visual, vec![0.5, 1.0, -1.0, 2.0]);
        let b = item(3, Modality::Text, vec![1.5, 0.0, 1.0, 0.0]);
        assert_eq!(edge_probability(&p, &a, &b).unwrap(), 0.5);
    }

    #[test]
    fn output_bias_ten() {
        let mut p = PredictorParams::zeros(2);
        p.l3.b[0] = 10.0;
        let a = item(1, Modality::Visual, vec![0.5, 1.0]);
        let b = item(3, Modality::Text, vec![1.5, 0.0]);
        let got = edge_probability(&p, &a, &b).unwrap();
        assert!((got - 0.999_954_602_131_297_6).abs() < 1e-12, "{got}");
    }

    #[test]
    fn shape_errors() {
        let p = PredictorParams::zeros(3);
        let a = item(1, Modality::Visual, vec![0.5, 1.0]);
        assert!(edge_probability(&p, &a, &a).is_err());
    }

    #[test]
    fn single_item_graph_has_no_edges() {
        let p = PredictorParams::zeros(2);
        let g = build_graph(vec![item(1, Modality::Visual, vec![1.0, 0.0])], &p, 0.5).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(sparsity_stats(&g).edges_per_node, 0.0);
    }

    #[test]
    fn half_probability_predictor_gives_empty_graph() {
        let p = PredictorParams::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = build_graph(random_items(12, 3, &mut rng), &p, 0.5).unwrap();
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn triangle_has_two_edges_per_node() {
        let items = vec![
            item(1, Modality::Visual, vec![1.0, 0.0]),
            item(2, Modality::Visual, vec![1.0, 0.1]),
            item(3, Modality::Visual, vec![1.0, -0.1]),
        ];
        let g = build_cosine_graph(items, 0.5).unwrap();
        let s = sparsity_stats(&g);
        assert_eq!(g.num_edges(), 3);
        assert!((s.edges_per_node - 2.0).abs() < 1e-12);
        assert_eq!(s.degree_histogram, vec![0, 0, 3]);
    }

    #[test]
    fn dump_format() {
        let items = vec![
            item(2, Modality::Text, vec![1.0, 0.0]),
            item(1, Modality::Visual, vec![1.0, 0.0]),
        ];
        let g = build_cosine_graph(items, 0.5).unwrap();
        assert_eq!(g.dump(), "1 v 2 x 1.000000\n");
    }

    #[test]
    fn out_of_order_nodes_rejected() {
        let mut g = RelevanceGraph::new();
        g.add_node(item(2, Modality::Visual, vec![1.0])).unwrap();
        assert!(g.add_node(item(1, Modality::Knowledge, vec![1.0])).is_err());
    }

    #[test]
    fn twenty_items_match_reference_scorer() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut p = PredictorParams::random(6, &mut rng);
        // shift the output so both edge and non-edge decisions occur
        let items = random_items(20, 6, &mut rng);
        let x = pair_inputs(6, items.iter().zip(items.iter().skip(1)));
        let logits = p.logits(x);
        let mut sorted: Vec<f64> = logits.to_vec();
        sorted.sort_by(f64::total_cmp);
        p.l3.b[0] -= sorted[sorted.len() / 2];
        let g = build_graph(items.clone(), &p, 0.5).unwrap();
        let got: Vec<(usize, usize)> = g.edge_list().iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(got, reference_graph(&items, &p));
        assert!(!got.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn graph_equals_brute_force(n in 1usize..=64, seed in 0u64..10_000, shift in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = PredictorParams::random(4, &mut rng);
            p.l3.b[0] = shift;
            let items = random_items(n, 4, &mut rng);
            let g = build_graph(items.clone(), &p, 0.5).unwrap();
            let got: Vec<(usize, usize)> = g.edge_list().iter().map(|&(i, j, _)| (i, j)).collect();
            prop_assert_eq!(got, reference_graph(&items, &p));
            for i in 0..g.num_nodes() {
                prop_assert!(!g.has_edge(i, i));
                for &j in g.neighbors(i) {
                    prop_assert!(g.has_edge(j, i));
                }
            }
        }

        #[test]
        fn raising_output_bias_never_removes_edges(seed in 0u64..10_000, bump in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PredictorParams::random(4, &mut rng);
            let items = random_items(15, 4, &mut rng);
            let mut q = p.clone();
            q.l3.b[0] += bump;
            let before = build_graph(items.clone(), &p, 0.5).unwrap();
            let after = build_graph(items, &q, 0.5).unwrap();
            for (i, j, _) in before.edge_list() {
                prop_assert!(after.has_edge(i, j));
            }
        }
    }
}
