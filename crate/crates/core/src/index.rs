//! Two-tier memory index: a flat window over the most recent items plus a
//! 4-ary centroid tree over everything older, searched with a beam of 2.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::ProjectedItem;
use crate::error::{Error, Result};
use crate::linalg::cosine;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    /// Items with `t > T - window` stay in the flat tier.
    pub window: usize,
    /// Full rebuild of the old tier every this many insertions.
    pub rebuild_every: usize,
    /// Leaf count is `max(1, floor(T / items_per_leaf))`.
    pub items_per_leaf: usize,
    pub fanout: usize,
    pub beam: usize,
    pub lloyd_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            window: 20,
            rebuild_every: 10,
            items_per_leaf: 10,
            fanout: 4,
            beam: 2,
            lloyd_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub centroid: Vec<f64>,
    pub t_range: (usize, usize),
    pub children: Vec<usize>,
    /// Indices into `Tree::items`; non-empty only for leaves.
    pub members: Vec<usize>,
    pub parent: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    pub items: Vec<ProjectedItem>,
    /// `levels[0]` are the leaves, the last level holds the root.
    pub levels: Vec<Vec<usize>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of<'a>(vectors: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

fn kmeanspp_seeds<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (dd, p) in d2.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Every cluster ends non-empty
/// when `k <= points.len()`.
fn kmeans<R: Rng>(points: &[&[f64]], k: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let d = points[0].len();
    let mut centers = kmeanspp_seeds(points, k, rng);
    let mut assign = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centers);
        }
        repair_empty(points, &mut assign, &mut centers);
        for (c, center) in centers.iter_mut().enumerate() {
            *center = mean_of(
                points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| *p),
                d,
            );
        }
    }
    assign
}

fn repair_empty(points: &[&[f64]], assign: &mut [usize], centers: &mut [Vec<f64>]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // move the worst-fit point of a multi-member cluster
        let donor = (0..points.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(points[i], &centers[assign[i]]);
                let dj = sq_dist(points[j], &centers[assign[j]]);
                di.total_cmp(&dj).then(j.cmp(&i))
            });
        match donor {
            Some(i) => {
                assign[i] = empty;
                centers[empty] = points[i].to_vec();
            }
            None => return,
        }
    }
}

/// Groups points into `ceil(n / cap)` clusters of at most `cap` members by
/// capacity-constrained Lloyd iterations.
fn capacity_groups<R: Rng>(points: &[&[f64]], cap: usize, iters: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let g = n.div_ceil(cap);
    let d = points[0].len();
    let mut centers = kmeanspp_seeds(points, g, rng);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters.max(1) {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * g);
        for (i, p) in points.iter().enumerate() {
            for (c, center) in centers.iter().enumerate() {
                pairs.push((sq_dist(p, center), i, c));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        assign.fill(usize::MAX);
        let mut counts = vec![0usize; g];
        for (_, i, c) in pairs {
            if assign[i] == usize::MAX && counts[c] < cap {
                assign[i] = c;
                counts[c] += 1;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            *center = mean_of(
                points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| *p),
                d,
            );
        }
    }
    assign
}

impl Tree {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn leaves(&self) -> &[usize] {
        &self.levels[0]
    }

    fn recompute_leaf(&mut self, node: usize) {
        let d = self.items[0].e.len();
        let n = &self.nodes[node];
        let centroid = mean_of(n.members.iter().map(|&i| &self.items[i].e[..]), d);
        let lo = n.members.iter().map(|&i| self.items[i].t).min().unwrap_or(0);
        let hi = n.members.iter().map(|&i| self.items[i].t).max().unwrap_or(0);
        let n = &mut self.nodes[node];
        n.centroid = centroid;
        n.t_range = (lo, hi);
    }

    fn recompute_internal(&mut self, node: usize) {
        let d = self.items[0].e.len();
        let children = self.nodes[node].children.clone();
        let centroid = mean_of(children.iter().map(|&c| &self.nodes[c].centroid[..]), d);
        let lo = children.iter().map(|&c| self.nodes[c].t_range.0).min().unwrap_or(0);
        let hi = children.iter().map(|&c| self.nodes[c].t_range.1).max().unwrap_or(0);
        let n = &mut self.nodes[node];
        n.centroid = centroid;
        n.t_range = (lo, hi);
    }

    /// Appends an item to the leaf with the nearest centroid and refreshes
    /// centroids and time ranges along the path to the root.
    fn assign_online(&mut self, item: ProjectedItem) {
        let leaf = *self
            .leaves()
            .iter()
            .min_by(|&&a, &&b| {
                sq_dist(&item.e, &self.nodes[a].centroid)
                    .total_cmp(&sq_dist(&item.e, &self.nodes[b].centroid))
                    .then(a.cmp(&b))
            })
            .expect("tree has at least one leaf");
        self.items.push(item);
        let idx = self.items.len() - 1;
        self.nodes[leaf].members.push(idx);
        self.recompute_leaf(leaf);
        let mut cur = self.nodes[leaf].parent;
        while let Some(p) = cur {
            self.recompute_internal(p);
            cur = self.nodes[p].parent;
        }
    }

    /// Checks fan-out, centroid and time-range invariants.
    pub fn check_invariants(&self, fanout: usize) -> Result<()> {
        let d = self.items.first().map_or(0, |it| it.e.len());
        for (id, n) in self.nodes.iter().enumerate() {
            if n.children.len() > fanout {
                return Err(Error::Contract(format!("node {id} has {} children", n.children.len())));
            }
            let (want, lo, hi) = if n.is_leaf() {
                (
                    mean_of(n.members.iter().map(|&i| &self.items[i].e[..]), d),
                    n.members.iter().map(|&i| self.items[i].t).min(),
                    n.members.iter().map(|&i| self.items[i].t).max(),
                )
            } else {
                (
                    mean_of(n.children.iter().map(|&c| &self.nodes[c].centroid[..]), d),
                    n.children.iter().map(|&c| self.nodes[c].t_range.0).min(),
                    n.children.iter().map(|&c| self.nodes[c].t_range.1).max(),
                )
            };
            if want.iter().zip(&n.centroid).any(|(a, b)| (a - b).abs() > 1e-9) {
                return Err(Error::Contract(format!("node {id} centroid is stale")));
            }
            if (lo, hi) != (Some(n.t_range.0), Some(n.t_range.1)) {
                return Err(Error::Contract(format!("node {id} time range is stale")));
            }
        }
        Ok(())
    }
}

/// Clusters `items` into `k` leaves (clamped to the item count) and stacks
/// capacity-`fanout` groupings on top until a single root remains.
pub fn build_tree(items: Vec<ProjectedItem>, k: usize, config: &IndexConfig, seed: u64) -> Result<Tree> {
    if items.is_empty() {
        return Err(Error::Empty("build_tree needs at least one item"));
    }
    if k == 0 {
        return Err(Error::Config("leaf count must be at least 1".into()));
    }
    let k = k.min(items.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<&[f64]> = items.iter().map(|it| &it.e[..]).collect();
    let assign = kmeans(&points, k, config.lloyd_iters, &mut rng);

    let mut nodes: Vec<TreeNode> = (0..k)
        .map(|_| TreeNode {
            centroid: Vec::new(),
            t_range: (0, 0),
            children: Vec::new(),
            members: Vec::new(),
            parent: None,
        })
        .collect();
    for (i, &c) in assign.iter().enumerate() {
        nodes[c].members.push(i);
    }
    let mut tree = Tree {
        nodes,
        root: 0,
        items,
        levels: vec![(0..k).collect()],
    };
    for leaf in 0..k {
        tree.recompute_leaf(leaf);
    }

    while tree.levels.last().unwrap().len() > 1 {
        let level = tree.levels.last().unwrap().clone();
        let points: Vec<&[f64]> = level.iter().map(|&n| &tree.nodes[n].centroid[..]).collect();
        let groups = capacity_groups(&points, config.fanout, config.lloyd_iters, &mut rng);
        let n_groups = level.len().div_ceil(config.fanout);
        let base = tree.nodes.len();
        for _ in 0..n_groups {
            tree.nodes.push(TreeNode {
                centroid: Vec::new(),
                t_range: (0, 0),
                children: Vec::new(),
                members: Vec::new(),
                parent: None,
            });
        }
        for (&child, &g) in level.iter().zip(&groups) {
            tree.nodes[base + g].children.push(child);
            tree.nodes[child].parent = Some(base + g);
        }
        let next: Vec<usize> = (base..base + n_groups).collect();
        for &p in &next {
            tree.recompute_internal(p);
        }
        tree.levels.push(next);
    }
    tree.root = tree.levels.last().unwrap()[0];
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub item: ProjectedItem,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub items: Vec<ScoredItem>,
    /// Window cosines plus centroid cosines.
    pub node_evaluations: usize,
    /// Cosines against members of the leaves reached by the beam.
    pub leaf_item_evaluations: usize,
}

fn rank(mut scored: Vec<ScoredItem>, k: usize) -> Vec<ScoredItem> {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.item.t.cmp(&b.item.t))
            .then(a.item.modality.cmp(&b.item.modality))
    });
    scored.truncate(k);
    scored
}

/// Full scan with cosine ranking; ties go to the smaller timestep.
pub fn retrieve_exact(items: &[ProjectedItem], query: &ProjectedItem, k: usize) -> Vec<ScoredItem> {
    let scored = items
        .iter()
        .map(|it| ScoredItem {
            score: cosine(&query.e, &it.e),
            item: it.clone(),
        })
        .collect();
    rank(scored, k)
}

/// Read-only view of an index; stays valid while the index keeps inserting.
#[derive(Debug, Clone)]
pub struct IndexSnapshot {
    window: Vec<ProjectedItem>,
    tree: Option<Arc<Tree>>,
    beam: usize,
}

impl IndexSnapshot {
    pub fn len(&self) -> usize {
        self.window.len() + self.tree.as_ref().map_or(0, |t| t.items.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn retrieve(&self, query: &ProjectedItem, k: usize) -> Result<Retrieval> {
        retrieve_in(&self.window, self.tree.as_deref(), self.beam, query, k)
    }
}

fn retrieve_in(
    window: &[ProjectedItem],
    tree: Option<&Tree>,
    beam_width: usize,
    query: &ProjectedItem,
    k: usize,
) -> Result<Retrieval> {
    if window.is_empty() && tree.is_none() {
        return Err(Error::Empty("retrieve on an empty index"));
    }
    let mut scored: Vec<ScoredItem> = window
        .iter()
        .map(|it| ScoredItem {
            score: cosine(&query.e, &it.e),
            item: it.clone(),
        })
        .collect();
    let mut node_evaluations = window.len();
    let mut leaf_item_evaluations = 0;
    if let Some(tree) = tree {
        let mut beam = vec![tree.root];
        while !tree.nodes[beam[0]].is_leaf() {
            let mut frontier: Vec<(f64, usize)> = beam
                .iter()
                .flat_map(|&n| tree.nodes[n].children.iter().copied())
                .map(|c| (cosine(&query.e, &tree.nodes[c].centroid), c))
                .collect();
            node_evaluations += frontier.len();
            frontier.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            beam = frontier.into_iter().take(beam_width).map(|(_, c)| c).collect();
        }
        for leaf in beam {
            for &m in &tree.nodes[leaf].members {
                let it = &tree.items[m];
                scored.push(ScoredItem {
                    score: cosine(&query.e, &it.e),
                    item: it.clone(),
                });
                leaf_item_evaluations += 1;
            }
        }
    }
    Ok(Retrieval {
        items: rank(scored, k),
        node_evaluations,
        leaf_item_evaluations,
    })
}

/// One modality stream's memory.
#[derive(Debug, Clone)]
pub struct MemoryIndex {
    config: IndexConfig,
    window: VecDeque<ProjectedItem>,
    tree: Option<Arc<Tree>>,
    inserted: usize,
    last_t: Option<usize>,
}

impl MemoryIndex {
    pub fn new(config: IndexConfig) -> Self {
        MemoryIndex {
            config,
            window: VecDeque::new(),
            tree: None,
            inserted: 0,
            last_t: None,
        }
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.inserted
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0
    }

    pub fn window(&self) -> impl Iterator<Item = &ProjectedItem> {
        self.window.iter()
    }

    pub fn tree(&self) -> Option<&Tree> {
        self.tree.as_deref()
    }

    /// Leaf count target for the current size.
    pub fn target_leaves(&self) -> usize {
        (self.inserted / self.config.items_per_leaf).max(1)
    }

    pub fn insert(&mut self, item: ProjectedItem) -> Result<()> {
        if let Some(last) = self.last_t {
            if item.t <= last {
                return Err(Error::Contract(format!(
                    "out-of-order insert: t={} after t={last}",
                    item.t
                )));
            }
        }
        self.last_t = Some(item.t);
        self.inserted += 1;
        self.window.push_back(item);
        while self.window.len() > self.config.window {
            let old = self.window.pop_front().expect("window is non-empty");
            match &mut self.tree {
                Some(tree) => Arc::make_mut(tree).assign_online(old),
                None => {
                    let seed = self.rebuild_seed();
                    self.tree = Some(Arc::new(build_tree(vec![old], 1, &self.config, seed)?));
                }
            }
        }
        if self.inserted % self.config.rebuild_every == 0 {
            if let Some(tree) = &self.tree {
                let old_items = tree.items.clone();
                let seed = self.rebuild_seed();
                self.tree = Some(Arc::new(build_tree(old_items, self.target_leaves(), &self.config, seed)?));
            }
        }
        Ok(())
    }

    fn rebuild_seed(&self) -> u64 {
        self.config.seed ^ (self.inserted as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    pub fn snapshot(&self) -> IndexSnapshot {
        IndexSnapshot {
            window: self.window.iter().cloned().collect(),
            tree: self.tree.clone(),
            beam: self.config.beam,
        }
    }

    pub fn retrieve(&self, query: &ProjectedItem, k: usize) -> Result<Retrieval> {
        let window: Vec<ProjectedItem> = self.window.iter().cloned().collect();
        retrieve_in(&window, self.tree.as_deref(), self.config.beam, query, k)
    }

    /// Every stored item (window and tree), in no particular order.
    pub fn all_items(&self) -> Vec<&ProjectedItem> {
        let mut out: Vec<&ProjectedItem> = self.window.iter().collect();
        if let Some(t) = &self.tree {
            out.extend(t.items.iter());
        }
        out
    }
}

/// Ranking of `a` against `b` used by retrieval: higher score first, then smaller t.
pub fn compare_scored(a: &ScoredItem, b: &ScoredItem) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item.t.cmp(&b.item.t))
}
