//! Exact-greedy binary trees shared by the forest and the boosting
//! learner, plus the random forest itself.
//!
//! Each sample carries two additive statistics `(a, b)` and a multiplicity.
//! The forest uses weighted positive/negative mass with a Gini criterion;
//! boosting uses gradient/hessian sums with the regularized Newton gain.
//! Split search keeps one presorted index array per feature and partitions
//! every array stably as nodes split, so no node re-sorts.

use serde::{Deserialize, Serialize};

use super::{check_xy, ClassWeights, ClassicalError};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use rand::Rng as _;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Criterion {
    /// `a` = weighted positive mass, `b` = weighted negative mass.
    Gini,
    /// `a` = gradient, `b` = hessian.
    Newton { lambda: f64 },
}

impl Criterion {
    /// Node score whose increase over the parent is the split gain.
    fn score(self, a: f64, b: f64) -> f64 {
        match self {
            Criterion::Gini => {
                let w = a + b;
                if w > 0.0 {
                    (a * a + b * b) / w - w
                } else {
                    0.0
                }
            }
            Criterion::Newton { lambda } => 0.5 * a * a / (b + lambda),
        }
    }

    fn leaf(self, a: f64, b: f64) -> f64 {
        match self {
            Criterion::Gini => {
                if a + b > 0.0 {
                    a / (a + b)
                } else {
                    0.0
                }
            }
            Criterion::Newton { lambda } => -a / (b + lambda),
        }
    }
}

/// Split gain for children `(al, bl)`, `(ar, br)` of a parent holding their sum.
pub fn split_gain(c: Criterion, al: f64, bl: f64, ar: f64, br: f64) -> f64 {
    c.score(al, bl) + c.score(ar, br) - c.score(al + ar, bl + br)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Minimum total multiplicity in each child.
    pub min_leaf: usize,
    /// Minimum `b` mass in each child (hessian for boosting).
    pub min_child_b: f64,
    /// Features tried per node; `None` = all.
    pub mtry: Option<usize>,
    pub min_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// Flattened tree; node 0 is the root. Rows with `x[feature] <= threshold`
/// go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value } => Some(*value),
            _ => None,
        })
    }
}

/// Column-major copy of the training rows with per-feature sort orders.
pub struct Presorted {
    pub cols: Vec<Vec<f64>>,
    order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let cols: Vec<Vec<f64>> = (0..d).map(|f| x.iter().map(|r| r[f]).collect()).collect();
        let order = cols
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..c.len() as u32).collect();
                idx.sort_by(|&i, &j| c[i as usize].total_cmp(&c[j as usize]).then(i.cmp(&j)));
                idx
            })
            .collect();
        Self { cols, order }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }
}

struct Builder<'a> {
    data: &'a Presorted,
    a: &'a [f64],
    b: &'a [f64],
    mult: &'a [u32],
    crit: Criterion,
    p: TreeParams,
    /// Per-feature index arrays restricted to in-bag samples; each node owns
    /// the same contiguous range in all of them.
    idx: Vec<Vec<u32>>,
    go_left: Vec<bool>,
    scratch: Vec<u32>,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    rng: Option<Rng>,
    features: Vec<usize>,
}

struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
    split_pos: usize,
}

impl<'a> Builder<'a> {
    /// Node totals, accumulated in sample-index order so they do not depend
    /// on which feature's ordering is used.
    fn sums(&mut self, lo: usize, hi: usize) -> (f64, f64, u64) {
        self.scratch.clear();
        self.scratch.extend_from_slice(&self.idx[0][lo..hi]);
        self.scratch.sort_unstable();
        let (mut sa, mut sb, mut sc) = (0.0, 0.0, 0u64);
        for &i in &self.scratch {
            let i = i as usize;
            sa += self.a[i];
            sb += self.b[i];
            sc += self.mult[i] as u64;
        }
        (sa, sb, sc)
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.data.n_features();
        match (self.p.mtry, self.rng.as_mut()) {
            (Some(m), Some(rng)) if m < d => {
                // Partial Fisher-Yates over a persistent permutation.
                for k in 0..m {
                    let j = rng.gen_range(k..d);
                    self.features.swap(k, j);
                }
                let mut f = self.features[..m].to_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        }
    }

    fn find_split(&mut self, lo: usize, hi: usize, sa: f64, sb: f64, sc: u64) -> Option<Best> {
        let mut best: Option<Best> = None;
        let min_leaf = self.p.min_leaf as u64;
        for f in self.candidate_features() {
            let col = &self.data.cols[f];
            let ids = &self.idx[f][lo..hi];
            let (mut la, mut lb, mut lc) = (0.0, 0.0, 0u64);
            for k in 0..ids.len() - 1 {
                let i = ids[k] as usize;
                la += self.a[i];
                lb += self.b[i];
                lc += self.mult[i] as u64;
                let (xv, xn) = (col[i], col[ids[k + 1] as usize]);
                if xn <= xv {
                    continue;
                }
                let (ra, rb, rc) = (sa - la, sb - lb, sc - lc);
                if lc < min_leaf || rc < min_leaf {
                    continue;
                }
                if lb < self.p.min_child_b || rb < self.p.min_child_b {
                    continue;
                }
                let gain = split_gain(self.crit, la, lb, ra, rb);
                if gain <= self.p.min_gain {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some(b) if gain != b.gain => gain > b.gain,
                    Some(b) => self.tie_prefers(f, &ids[..=k], b, lo),
                };
                if better {
                    let mid = xv + (xn - xv) / 2.0;
                    let threshold = if mid < xn { mid } else { xv };
                    best = Some(Best { gain, feature: f, threshold, split_pos: lo + k + 1 });
                }
            }
        }
        best
    }

    /// Break an exact gain tie without reference to column position: prefer
    /// the lexicographically smaller left sample set, then the smaller column
    /// contents. Keeps trees invariant under feature permutation.
    fn tie_prefers(&self, f: usize, left: &[u32], b: &Best, lo: usize) -> bool {
        let mut cand = left.to_vec();
        let mut inc = self.idx[b.feature][lo..b.split_pos].to_vec();
        cand.sort_unstable();
        inc.sort_unstable();
        match cand.cmp(&inc) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => {
                let (cf, cb) = (&self.data.cols[f], &self.data.cols[b.feature]);
                cf.iter().zip(cb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less)
            }
        }
    }

    /// Stable partition of every feature's range by `go_left`.
    fn partition(&mut self, lo: usize, hi: usize, mid: usize) {
        for f in 0..self.idx.len() {
            let seg = &mut self.idx[f][lo..hi];
            self.scratch.clear();
            let mut w = 0;
            for r in 0..seg.len() {
                let i = seg[r];
                if self.go_left[i as usize] {
                    seg[w] = i;
                    w += 1;
                } else {
                    self.scratch.push(i);
                }
            }
            debug_assert_eq!(lo + w, mid);
            seg[w..].copy_from_slice(&self.scratch);
        }
    }

    fn build(&mut self, lo: usize, hi: usize, depth: usize) -> usize {
        let (sa, sb, sc) = self.sums(lo, hi);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.crit.leaf(sa, sb) });
        let pure = matches!(self.crit, Criterion::Gini) && (sa <= 0.0 || sb <= 0.0);
        if depth >= self.p.max_depth || hi - lo < 2 || pure {
            return id;
        }
        let Some(best) = self.find_split(lo, hi, sa, sb, sc) else { return id };
        let col = &self.data.cols[best.feature];
        for &i in &self.idx[best.feature][lo..hi] {
            self.go_left[i as usize] = col[i as usize] <= best.threshold;
        }
        self.partition(lo, hi, best.split_pos);
        self.importance[best.feature] += best.gain;
        let left = self.build(lo, best.split_pos, depth + 1);
        let right = self.build(best.split_pos, hi, depth + 1);
        self.nodes[id] = Node::Split { feature: best.feature, threshold: best.threshold, left, right };
        id
    }
}

/// Grow one tree on the samples with `mult[i] > 0`. Returns the tree and the
/// per-feature total gain.
pub fn grow_tree(
    data: &Presorted,
    a: &[f64],
    b: &[f64],
    mult: &[u32],
    crit: Criterion,
    p: TreeParams,
    rng: Option<Rng>,
) -> (Tree, Vec<f64>) {
    let d = data.n_features();
    let idx: Vec<Vec<u32>> = data
        .order
        .iter()
        .map(|o| o.iter().copied().filter(|&i| mult[i as usize] > 0).collect())
        .collect();
    let n_in = idx.first().map_or(0, Vec::len);
    let mut bld = Builder {
        data,
        a,
        b,
        mult,
        crit,
        p,
        idx,
        go_left: vec![false; a.len()],
        scratch: Vec::with_capacity(n_in),
        nodes: Vec::new(),
        importance: vec![0.0; d],
        rng,
        features: (0..d).collect(),
    };
    if n_in == 0 {
        return (Tree { nodes: vec![Node::Leaf { value: crit.leaf(0.0, 0.0) }] }, vec![0.0; d]);
    }
    bld.build(0, n_in, 0);
    (Tree { nodes: bld.nodes }, bld.importance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features per split; `None` = ceil(sqrt(d)).
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 200, max_depth: 8, mtry: None, min_leaf: 5, bootstrap: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    /// Impurity-decrease importances, normalized to sum 1.
    pub importances: Vec<f64>,
}

impl ForestModel {
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let k = self.trees.len() as f64;
        x.iter()
            .map(|r| (self.trees.iter().map(|t| t.predict_row(r)).sum::<f64>() / k).clamp(0.0, 1.0))
            .collect()
    }
}

/// Random forest with class-weighted Gini splits. Tree `t` draws its
/// bootstrap sample and feature subsets from `derive_seed(seed, t)`.
pub fn train_forest(
    x: &[Vec<f64>],
    y: &[f64],
    cw: ClassWeights,
    p: &ForestParams,
    seed: u64,
) -> Result<ForestModel, ClassicalError> {
    let d = check_xy(x, y)?;
    if p.n_trees == 0 || p.max_depth == 0 {
        return Err(ClassicalError::InvalidParams("n_trees and max_depth must be positive".into()));
    }
    let mtry = p.mtry.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);
    let data = Presorted::new(x);
    let n = x.len();
    let tp = TreeParams { max_depth: p.max_depth, min_leaf: p.min_leaf, min_child_b: f64::NEG_INFINITY, mtry: Some(mtry), min_gain: 1e-12 };
    let mut trees = Vec::with_capacity(p.n_trees);
    let mut imp = vec![0.0; d];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for t in 0..p.n_trees {
        let mut rng = rng_from_seed(derive_seed(seed, t as u64));
        let mut mult = vec![0u32; n];
        if p.bootstrap {
            for _ in 0..n {
                mult[rng.gen_range(0..n)] += 1;
            }
        } else {
            mult.iter_mut().for_each(|m| *m = 1);
        }
        for i in 0..n {
            let w = mult[i] as f64 * cw.of(y[i]);
            if y[i] > 0.5 {
                (a[i], b[i]) = (w, 0.0);
            } else {
                (a[i], b[i]) = (0.0, w);
            }
        }
        let (tree, ti) = grow_tree(&data, &a, &b, &mult, Criterion::Gini, tp, Some(rng));
        imp.iter_mut().zip(ti).for_each(|(s, v)| *s += v);
        trees.push(tree);
    }
    let total: f64 = imp.iter().sum();
    let importances = if total > 0.0 {
        imp.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / d as f64; d]
    };
    Ok(ForestModel { trees, importances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 5 == 0;
            let c = if pos { 1.0 } else { -0.5 };
            x.push(vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), c * 0.5 + rng.gen_range(-1.0..1.0)]);
            y.push(pos as u8 as f64);
        }
        (x, y)
    }

    #[test]
    fn gini_gain_of_noop_split_is_zero() {
        assert!(split_gain(Criterion::Gini, 2.0, 3.0, 2.0, 3.0).abs() < 1e-12);
        assert_eq!(split_gain(Criterion::Gini, 2.0, 3.0, 0.0, 0.0), 0.0);
        // A pure split of a balanced node removes all impurity: W - (a^2+b^2)/W = 1.
        assert!((split_gain(Criterion::Gini, 1.0, 0.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pure_single_feature_split() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, ((i * 7) % 11) as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| (i >= 20) as u8 as f64).collect();
        let p = ForestParams { n_trees: 10, mtry: Some(2), min_leaf: 1, ..Default::default() };
        let m = train_forest(&x, &y, ClassWeights::UNIFORM, &p, 1).unwrap();
        let pred = m.predict_proba(&x);
        let acc = pred.iter().zip(&y).filter(|(p, y)| (**p >= 0.5) == (**y > 0.5)).count();
        assert_eq!(acc, 40);
        for t in &m.trees {
            if let Node::Split { feature, .. } = t.nodes[0] {
                assert_eq!(feature, 0);
                assert_eq!(t.depth(), 1);
            }
        }
    }

    #[test]
    fn importances_sum_to_one_and_seed_is_deterministic() {
        let (x, y) = blobs(200, 4);
        let p = ForestParams { n_trees: 20, ..Default::default() };
        let a = train_forest(&x, &y, ClassWeights::balanced(&y), &p, 9).unwrap();
        let b = train_forest(&x, &y, ClassWeights::balanced(&y), &p, 9).unwrap();
        assert!((a.importances.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = train_forest(&x, &y, ClassWeights::balanced(&y), &p, 10).unwrap();
        assert_ne!(a, c);
        assert!(a.trees.iter().all(|t| t.depth() <= 8));
        assert!(a.trees.iter().flat_map(|t| t.leaves()).all(|v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn column_permutation_with_all_features() {
        let (x, y) = blobs(150, 5);
        let perm = [2usize, 0, 1];
        let xp: Vec<Vec<f64>> = x.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let p = ForestParams { n_trees: 15, mtry: Some(3), ..Default::default() };
        let a = train_forest(&x, &y, ClassWeights::balanced(&y), &p, 2).unwrap();
        let b = train_forest(&xp, &y, ClassWeights::balanced(&y), &p, 2).unwrap();
        assert_eq!(a.predict_proba(&x), b.predict_proba(&xp));
        for (k, &j) in perm.iter().enumerate() {
            assert!((b.importances[k] - a.importances[j]).abs() < 1e-12);
        }
    }

    /// Exhaustive split search by re-sorting, for comparison with the
    /// presorted builder on one node.
    #[test]
    fn root_split_matches_brute_force() {
        let (x, y) = blobs(60, 8);
        let a: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 4.0 } else { 0.0 }).collect();
        let b: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 0.0 } else { 1.0 }).collect();
        let mult = vec![1u32; x.len()];
        let data = Presorted::new(&x);
        let tp = TreeParams { max_depth: 1, min_leaf: 1, min_child_b: f64::NEG_INFINITY, mtry: None, min_gain: 0.0 };
        let (tree, _) = grow_tree(&data, &a, &b, &mult, Criterion::Gini, tp, None);
        let mut best = (f64::NEG_INFINITY, 0, 0.0);
        for f in 0..3 {
            let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = (w[0] + w[1]) / 2.0;
                let (mut l, mut r) = ((0.0, 0.0), (0.0, 0.0));
                for i in 0..x.len() {
                    let s = if x[i][f] <= t { &mut l } else { &mut r };
                    s.0 += a[i];
                    s.1 += b[i];
                }
                let g = split_gain(Criterion::Gini, l.0, l.1, r.0, r.1);
                if g > best.0 {
                    best = (g, f, t);
                }
            }
        }
        match tree.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, best.1);
                assert!((threshold - best.2).abs() < 1e-12);
            }
            _ => panic!("expected a split"),
        }
    }
}
