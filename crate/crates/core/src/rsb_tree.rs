//! Finite-RSB order parameters as weighted trees, and the K-RSB recursion.
//!
//! A tree of depth `K+1` has internal nodes at levels `0..=K` and leaves at
//! level `K+1` carrying magnetizations in `[-1, 1]`. For `n` independent
//! copies of the tree walk and a function `psi` of the `n` leaf values,
//!
//! ```text
//! Xi_{K+1}    = exp(psi)
//! Xi_l(a)     = sum_b w(b | a) Xi_{l+1}(b)^(x_l / x_{l+1})      l = 1..K
//! Phi_hat     = sum_a w(a | root) (1/x_1) log Xi_1(a)
//! ```
//!
//! where `a`, `b` range over `n`-tuples of nodes and `w` is the product of
//! the per-copy weights.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cavity::{coupling_draws, CavityKernel, CouplingPlan, ModelParams, PsiKind};
use crate::error::{Result, RsbError};
use crate::nested::{self, Channels, McPlan, NestedModel};
use crate::stats::{EstimateWithError, RunningStats, SeedStream};

/// Upper bound on the number of leaf tuples the exact DP will visit.
pub const DP_LIMIT: f64 = 1e7;

/// JSON form of a tree: `{"w": [...], "children": [...]}` with leaves `{"m": v}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeSpec {
    Leaf { m: f64 },
    Internal { w: Vec<f64>, children: Vec<TreeSpec> },
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Internal { weights: Vec<f64>, cumulative: Vec<f64>, children: Vec<usize> },
    Leaf { value: f64 },
}

/// Finite hierarchical measure: a weighted tree with equal-depth leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalMeasure {
    depth: usize,
    nodes: Vec<Node>,
    by_level: Vec<Vec<usize>>,
}

impl HierarchicalMeasure {
    pub fn from_spec(spec: &TreeSpec) -> Result<Self> {
        let mut t = Self { depth: 0, nodes: Vec::new(), by_level: Vec::new() };
        let mut leaf_depth = None;
        t.insert(spec, 0, &mut leaf_depth)?;
        t.depth = leaf_depth.unwrap_or(0);
        if t.depth == 0 {
            return Err(RsbError::InvalidParameter("the root must be an internal node".into()));
        }
        Ok(t)
    }

    fn insert(&mut self, spec: &TreeSpec, level: usize, leaf_depth: &mut Option<usize>) -> Result<usize> {
        let id = self.nodes.len();
        if self.by_level.len() <= level {
            self.by_level.push(Vec::new());
        }
        self.by_level[level].push(id);
        match spec {
            TreeSpec::Leaf { m } => {
                if !(m.abs() <= 1.0) {
                    return Err(RsbError::Domain(format!("leaf value {m} outside [-1, 1]")));
                }
                match *leaf_depth {
                    None => *leaf_depth = Some(level),
                    Some(d) if d != level => {
                        return Err(RsbError::InvalidParameter(format!("leaves at depths {d} and {level}")))
                    }
                    _ => {}
                }
                self.nodes.push(Node::Leaf { value: *m });
            }
            TreeSpec::Internal { w, children } => {
                if w.is_empty() || w.len() != children.len() {
                    return Err(RsbError::InvalidParameter(format!(
                        "{} weights for {} children",
                        w.len(),
                        children.len()
                    )));
                }
                if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(RsbError::InvalidParameter("weights must be positive".into()));
                }
                let total: f64 = w.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(RsbError::InvalidParameter(format!("weights sum to {total}, not 1")));
                }
                self.nodes.push(Node::Leaf { value: 0.0 });
                let ids = children.iter().map(|c| self.insert(c, level + 1, leaf_depth)).collect::<Result<Vec<_>>>()?;
                let mut cumulative = Vec::with_capacity(w.len());
                let mut acc = 0.0;
                for &v in w {
                    acc += v;
                    cumulative.push(acc);
                }
                *cumulative.last_mut().unwrap() = 1.0;
                self.nodes[id] = Node::Internal { weights: w.clone(), cumulative, children: ids };
            }
        }
        Ok(id)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(s)?)
    }

    pub fn to_spec(&self) -> TreeSpec {
        self.spec_of(0)
    }

    fn spec_of(&self, id: usize) -> TreeSpec {
        match &self.nodes[id] {
            Node::Leaf { value } => TreeSpec::Leaf { m: *value },
            Node::Internal { weights, children, .. } => {
                TreeSpec::Internal { w: weights.clone(), children: children.iter().map(|&c| self.spec_of(c)).collect() }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_spec()).expect("tree serializes")
    }

    /// A chain of `depth` single-child nodes ending in one leaf `m`.
    pub fn single_leaf(depth: usize, m: f64) -> Result<Self> {
        let mut spec = TreeSpec::Leaf { m };
        for _ in 0..depth {
            spec = TreeSpec::Internal { w: vec![1.0], children: vec![spec] };
        }
        Self::from_spec(&spec)
    }

    /// Tree with `branching[l]` children at every level-`l` node, weights
    /// from `weight(level, index)` (normalized per node) and leaves from
    /// `leaf(index)` in depth-first order.
    pub fn regular(
        branching: &[usize],
        mut weight: impl FnMut(usize, usize) -> f64,
        mut leaf: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        fn build(
            level: usize,
            branching: &[usize],
            weight: &mut dyn FnMut(usize, usize) -> f64,
            leaf: &mut dyn FnMut(usize) -> f64,
            leaves: &mut usize,
        ) -> TreeSpec {
            if level == branching.len() {
                let m = leaf(*leaves);
                *leaves += 1;
                return TreeSpec::Leaf { m };
            }
            let b = branching[level];
            let raw: Vec<f64> = (0..b).map(|i| weight(level, i)).collect();
            let total: f64 = raw.iter().sum();
            let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let head: f64 = w[..b - 1].iter().sum();
            w[b - 1] = 1.0 - head;
            let children = (0..b).map(|_| build(level + 1, branching, weight, leaf, leaves)).collect();
            TreeSpec::Internal { w, children }
        }
        if branching.is_empty() || branching.contains(&0) {
            return Err(RsbError::InvalidParameter("branching must be non-empty and positive".into()));
        }
        let mut leaves = 0;
        Self::from_spec(&build(0, branching, &mut weight, &mut leaf, &mut leaves))
    }

    /// Random tree with the given branching, weights bounded away from zero
    /// and leaf values uniform in `[-amp, amp]`.
    pub fn random<R: Rng + ?Sized>(branching: &[usize], amp: f64, rng: &mut R) -> Result<Self> {
        let mut ws = Vec::new();
        let mut ls = Vec::new();
        let n_nodes: usize = (0..branching.len()).map(|l| branching[..=l].iter().product::<usize>()).sum();
        let n_leaves: usize = branching.iter().product();
        for _ in 0..n_nodes {
            ws.push(rng.gen_range(0.2..1.0));
        }
        for _ in 0..n_leaves {
            ls.push(rng.gen_range(-amp..=amp));
        }
        let mut wi = 0;
        Self::regular(
            branching,
            |_, _| {
                wi += 1;
                ws[wi - 1]
            },
            |i| ls[i],
        )
    }

    /// `K + 1`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nodes_at(&self, level: usize) -> &[usize] {
        &self.by_level[level]
    }

    pub fn n_leaves(&self) -> usize {
        self.by_level[self.depth].len()
    }

    pub fn leaf_values(&self) -> Vec<f64> {
        self.by_level[self.depth].iter().map(|&i| self.leaf_value(i)).collect()
    }

    pub fn children(&self, node: usize) -> &[usize] {
        match &self.nodes[node] {
            Node::Internal { children, .. } => children,
            Node::Leaf { .. } => &[],
        }
    }

    pub fn weights(&self, node: usize) -> &[f64] {
        match &self.nodes[node] {
            Node::Internal { weights, .. } => weights,
            Node::Leaf { .. } => &[],
        }
    }

    pub fn cumulative(&self, node: usize) -> &[f64] {
        match &self.nodes[node] {
            Node::Internal { cumulative, .. } => cumulative,
            Node::Leaf { .. } => &[],
        }
    }

    pub fn leaf_value(&self, node: usize) -> f64 {
        match &self.nodes[node] {
            Node::Leaf { value } => *value,
            Node::Internal { .. } => f64::NAN,
        }
    }

    /// Child of `node` selected by inverse-CDF lookup of `u` in its weights.
    pub fn child_by_uniform(&self, node: usize, u: f64) -> usize {
        let cum = self.cumulative(node);
        let i = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        self.children(node)[i]
    }

    /// Same tree with every leaf value negated.
    pub fn negated(&self) -> Self {
        let mut t = self.clone();
        for n in &mut t.nodes {
            if let Node::Leaf { value } = n {
                *value = -*value;
            }
        }
        t
    }

    /// Probability of reaching each leaf (in `nodes_at(depth)` order).
    pub fn leaf_probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.nodes.len()];
        p[0] = 1.0;
        for level in 0..self.depth {
            for &id in &self.by_level[level] {
                for (&c, &w) in self.children(id).iter().zip(self.weights(id)) {
                    p[c] = p[id] * w;
                }
            }
        }
        self.by_level[self.depth].iter().map(|&i| p[i]).collect()
    }
}

/// Root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreePath {
    /// Node ids at levels `0..=depth`.
    pub nodes: Vec<usize>,
}

impl TreePath {
    pub fn leaf(&self) -> usize {
        *self.nodes.last().unwrap()
    }

    pub fn leaf_value(&self, tree: &HierarchicalMeasure) -> f64 {
        tree.leaf_value(self.leaf())
    }
}

pub fn sample_path<R: Rng + ?Sized>(tree: &HierarchicalMeasure, rng: &mut R) -> TreePath {
    let mut nodes = vec![tree.root()];
    for _ in 0..tree.depth() {
        let u: f64 = rng.gen();
        nodes.push(tree.child_by_uniform(*nodes.last().unwrap(), u));
    }
    TreePath { nodes }
}

/// `0 = x_0 < x_1 <= ... <= x_{K+1} = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsbExponents {
    x: Vec<f64>,
}

impl RsbExponents {
    /// `x` includes both `x_0 = 0` and `x_{K+1} = 1`.
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.len() < 2 || x[0] != 0.0 || *x.last().unwrap() != 1.0 {
            return Err(RsbError::InvalidParameter("exponents must start at 0 and end at 1".into()));
        }
        if !(x[1] > 0.0) {
            return Err(RsbError::InvalidParameter("x_1 must be positive".into()));
        }
        if x.windows(2).skip(1).any(|w| !(w[1] >= w[0])) {
            return Err(RsbError::InvalidParameter("exponents must be non-decreasing".into()));
        }
        Ok(Self { x })
    }

    pub fn values(&self) -> &[f64] {
        &self.x
    }

    /// `K`.
    pub fn k(&self) -> usize {
        self.x.len() - 2
    }

    /// Errors unless there is one exponent per tree level plus `x_0`.
    pub fn check_tree(&self, tree: &HierarchicalMeasure) -> Result<()> {
        if self.x.len() != tree.depth() + 1 {
            return Err(RsbError::GridMismatch(format!(
                "tree of depth {} needs {} exponents, got {}",
                tree.depth(),
                tree.depth() + 1,
                self.x.len()
            )));
        }
        Ok(())
    }
}

fn check_dp_size(tree: &HierarchicalMeasure, n: usize) -> Result<()> {
    let tuples = (tree.n_leaves() as f64).powi(n as i32);
    if tuples > DP_LIMIT {
        return Err(RsbError::SizeGuard(format!(
            "{} leaves over {n} copies gives {tuples:e} tuples (limit {DP_LIMIT:e})",
            tree.n_leaves()
        )));
    }
    Ok(())
}

struct Dp<'a, F: Fn(&[f64]) -> f64> {
    tree: &'a HierarchicalMeasure,
    x: &'a [f64],
    psi: &'a F,
    leaves: Vec<f64>,
    memo: Option<HashMap<(usize, Vec<usize>), f64>>,
}

impl<F: Fn(&[f64]) -> f64> Dp<'_, F> {
    /// `V_l(a) = (1/x_l) log Xi_l(a)` for `1 <= l <= K`, `V_{K+1} = psi`.
    fn value(&mut self, level: usize, tuple: &[usize]) -> f64 {
        let t = self.tree;
        if level == t.depth() {
            for (slot, &id) in self.leaves.iter_mut().zip(tuple) {
                *slot = t.leaf_value(id);
            }
            return (self.psi)(&self.leaves);
        }
        if let Some(v) = self.memo.as_ref().and_then(|m| m.get(&(level, tuple.to_vec()))) {
            return *v;
        }
        let v = self.value_uncached(level, tuple);
        if let Some(m) = self.memo.as_mut() {
            m.insert((level, tuple.to_vec()), v);
        }
        v
    }

    fn value_uncached(&mut self, level: usize, tuple: &[usize]) -> f64 {
        let t = self.tree;
        let e = self.x[level];
        let n = tuple.len();
        let mut idx = vec![0usize; n];
        let mut child = vec![0usize; n];
        let (mut m, mut s) = (f64::NEG_INFINITY, 0.0);
        loop {
            let mut logw = 0.0;
            for i in 0..n {
                child[i] = t.children(tuple[i])[idx[i]];
                logw += t.weights(tuple[i])[idx[i]].ln();
            }
            let a = logw + e * self.value(level + 1, &child);
            if a > m {
                s = s * (m - a).exp() + 1.0;
                m = a;
            } else {
                s += (a - m).exp();
            }
            let mut i = 0;
            loop {
                if i == n {
                    return (m + s.ln()) / e;
                }
                idx[i] += 1;
                if idx[i] < t.children(tuple[i]).len() {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }

    /// `sum_a w(a | root) V_1(a)`.
    fn phi_hat(&mut self, n: usize) -> f64 {
        let t = self.tree;
        let root = t.root();
        let b = t.children(root).len();
        let mut idx = vec![0usize; n];
        let mut tuple = vec![0usize; n];
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            for i in 0..n {
                tuple[i] = t.children(root)[idx[i]];
                w *= t.weights(root)[idx[i]];
            }
            total += w * self.value(1, &tuple);
            let mut i = 0;
            loop {
                if i == n {
                    return total;
                }
                idx[i] += 1;
                if idx[i] < b {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
        }
    }
}

/// Exact `Phi_hat` by dynamic programming over node tuples.
pub fn phi_hat_exact<F>(psi: &F, tree: &HierarchicalMeasure, x: &RsbExponents, n: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    x.check_tree(tree)?;
    if n == 0 {
        return Err(RsbError::InvalidParameter("need at least one copy".into()));
    }
    check_dp_size(tree, n)?;
    let mut dp = Dp { tree, x: x.values(), psi, leaves: vec![0.0; n], memo: None };
    Ok(dp.phi_hat(n))
}

/// Exact recursion values along sampled paths, memoized by node tuple.
pub struct ExactPhi<'a, F: Fn(&[f64]) -> f64> {
    dp: Dp<'a, F>,
}

impl<'a, F: Fn(&[f64]) -> f64> ExactPhi<'a, F> {
    pub fn new(psi: &'a F, tree: &'a HierarchicalMeasure, x: &'a RsbExponents, n: usize) -> Result<Self> {
        x.check_tree(tree)?;
        if n == 0 {
            return Err(RsbError::InvalidParameter("need at least one copy".into()));
        }
        check_dp_size(tree, n)?;
        Ok(Self { dp: Dp { tree, x: x.values(), psi, leaves: vec![0.0; n], memo: Some(HashMap::new()) } })
    }

    /// `V_1..V_{K+1}` at the node tuples of `paths` (one path per copy).
    /// `V_l` is the recursion value at the level-`l` tuple; on the Wiener
    /// side it is `phi` at grid time `q_{l-1}`.
    pub fn along(&mut self, paths: &[TreePath]) -> Vec<f64> {
        let depth = self.dp.tree.depth();
        (1..=depth)
            .map(|level| {
                let tuple: Vec<usize> = paths.iter().map(|p| p.nodes[level]).collect();
                self.dp.value(level, &tuple)
            })
            .collect()
    }
}

/// Tree walk of `n` copies, for the nested estimator. Outer draw picks the
/// level-1 nodes; inner level `l` picks the level-`l+1` nodes.
struct TreeModel<'a, F> {
    tree: &'a HierarchicalMeasure,
    n: usize,
    terminal: F,
}

/// Copies handled by the tree sampler without allocation.
const MAX_COPIES: usize = 64;

#[derive(Clone)]
struct TreeState {
    /// `nodes[level * n + copy]`
    nodes: Vec<usize>,
}

impl<F> NestedModel for TreeModel<'_, F>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    type State = TreeState;

    fn n_levels(&self) -> usize {
        self.tree.depth() - 1
    }

    fn new_state(&self) -> TreeState {
        let mut nodes = vec![0; (self.tree.depth() + 1) * self.n];
        nodes[..self.n].fill(self.tree.root());
        TreeState { nodes }
    }

    fn draw(&self, s: &mut TreeState, level: usize, rng: &mut ChaCha8Rng) {
        let n = self.n;
        for i in 0..n {
            let parent = s.nodes[level * n + i];
            s.nodes[(level + 1) * n + i] = self.tree.child_by_uniform(parent, rng.gen());
        }
    }

    fn level_active(&self, level: usize) -> bool {
        // a level whose nodes all have one child carries no randomness
        self.tree.nodes_at(level).iter().any(|&id| self.tree.children(id).len() > 1)
    }

    fn terminal(&self, s: &TreeState, values: &mut [f64], _dirs: &mut [f64]) {
        let n = self.n;
        let d = self.tree.depth();
        let mut leaves = [0.0; MAX_COPIES];
        for i in 0..n {
            leaves[i] = self.tree.leaf_value(s.nodes[d * n + i]);
        }
        (self.terminal)(&leaves[..n], values);
    }
}

fn check_copies(n: usize) -> Result<()> {
    if n == 0 || n > MAX_COPIES {
        return Err(RsbError::InvalidParameter(format!("copies must be in 1..={MAX_COPIES}, got {n}")));
    }
    Ok(())
}

fn tree_channels(x: &RsbExponents, n_channels: usize) -> Channels {
    let v = x.values();
    Channels::same_exponents(n_channels, &v[1..v.len() - 1])
}

/// Nested Monte Carlo estimate of `Phi_hat`.
pub fn phi_hat_mc<F>(
    psi: &F,
    tree: &HierarchicalMeasure,
    x: &RsbExponents,
    n: usize,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<EstimateWithError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    x.check_tree(tree)?;
    check_copies(n)?;
    let model = TreeModel { tree, n, terminal: |m: &[f64], out: &mut [f64]| out[0] = psi(m) };
    let out = nested::run(&model, &tree_channels(x, 1), plan, seed)?;
    Ok(out.estimate(0))
}

/// How `Phi_hat` is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Evaluator {
    Exact,
    MonteCarlo(McPlan),
}

/// `E_J[Phi_hat(psi_v) - Phi_hat(psi_e)]` with `Phi_hat` computed at fixed `J`.
///
/// With [`CouplingPlan::Exact`] the average over `J` is exact and the
/// reported error is Monte Carlo error only; with sampled couplings it is
/// the spread over draws.
pub fn krsb_functional(
    tree: &HierarchicalMeasure,
    x: &RsbExponents,
    params: &ModelParams,
    couplings: CouplingPlan,
    evaluator: &Evaluator,
    seed: SeedStream,
) -> Result<EstimateWithError> {
    let draws = coupling_draws(params, couplings, seed.substream(0))?;
    let n = params.n_fields();
    let mut per_j = Vec::with_capacity(draws.len());
    for (k, j) in draws.iter().enumerate() {
        let kernel = CavityKernel::new(params, j)?;
        let est = match evaluator {
            Evaluator::Exact => {
                let v = phi_hat_exact(&|m: &[f64]| kernel.vertex(m), tree, x, n)?;
                let e = phi_hat_exact(&|m: &[f64]| kernel.edge(m), tree, x, n)?;
                EstimateWithError::exact(v - e)
            }
            Evaluator::MonteCarlo(plan) => {
                x.check_tree(tree)?;
                check_copies(n)?;
                let model = TreeModel {
                    tree,
                    n,
                    terminal: |m: &[f64], out: &mut [f64]| {
                        out[0] = kernel.eval(PsiKind::Vertex, m);
                        out[1] = kernel.eval(PsiKind::Edge, m);
                    },
                };
                let out = nested::run(&model, &tree_channels(x, 2), plan, seed.substream(1 + k as u64))?;
                out.contrast(&[(0, 1.0), (1, -1.0)])
            }
        };
        per_j.push(est);
    }
    Ok(average_over_couplings(&per_j, couplings))
}

/// Equal-weight average of per-coupling estimates.
pub fn average_over_couplings(per_j: &[EstimateWithError], plan: CouplingPlan) -> EstimateWithError {
    let k = per_j.len() as f64;
    let mean = per_j.iter().map(|e| e.value).sum::<f64>() / k;
    let n_samples = per_j.iter().map(|e| e.n_samples).sum();
    let std_error = match plan {
        CouplingPlan::Exact => per_j.iter().map(|e| e.std_error * e.std_error).sum::<f64>().sqrt() / k,
        CouplingPlan::Sampled(_) => {
            let mut s = RunningStats::new();
            for e in per_j {
                s.push(e.value);
            }
            s.std_error()
        }
    };
    EstimateWithError { value: mean, std_error, n_samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_leaf(w: f64, a: f64, b: f64) -> HierarchicalMeasure {
        HierarchicalMeasure::from_spec(&TreeSpec::Internal {
            w: vec![1.0],
            children: vec![TreeSpec::Internal {
                w: vec![w, 1.0 - w],
                children: vec![TreeSpec::Leaf { m: a }, TreeSpec::Leaf { m: b }],
            }],
        })
        .unwrap()
    }

    #[test]
    fn json_round_trip_and_validation() {
        let t = two_leaf(0.3, 0.5, -0.25);
        let s = t.to_json();
        assert_eq!(HierarchicalMeasure::from_json(&s).unwrap(), t);
        assert!(HierarchicalMeasure::from_json(r#"{"w":[0.5,0.6],"children":[{"m":0},{"m":1}]}"#).is_err());
        assert!(HierarchicalMeasure::from_json(r#"{"w":[0.5,0.5],"children":[{"m":0},{"m":1.5}]}"#).is_err());
        assert!(HierarchicalMeasure::from_json(
            r#"{"w":[0.5,0.5],"children":[{"m":0},{"w":[1.0],"children":[{"m":0}]}]}"#
        )
        .is_err());
        assert!(HierarchicalMeasure::from_json(r#"{"w":[1.0,0.0],"children":[{"m":0},{"m":1}]}"#).is_err());
    }

    #[test]
    fn two_level_closed_form() {
        let (w, a, b) = (0.3, 0.8, -0.4);
        let t = two_leaf(w, a, b);
        let x = RsbExponents::new(vec![0.0, 0.5, 1.0]).unwrap();
        let v = phi_hat_exact(&|m: &[f64]| m[0], &t, &x, 1).unwrap();
        let expected = 2.0 * (w * (a / 2.0f64).exp() + (1.0 - w) * (b / 2.0f64).exp()).ln();
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn single_leaf_and_constant() {
        let t = HierarchicalMeasure::single_leaf(3, 0.6).unwrap();
        let x = RsbExponents::new(vec![0.0, 0.2, 0.7, 1.0]).unwrap();
        let v = phi_hat_exact(&|m: &[f64]| m[0] * m[1] + 0.1, &t, &x, 2).unwrap();
        assert!((v - 0.46).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = HierarchicalMeasure::random(&[2, 3, 2], 1.0, &mut rng).unwrap();
        assert!((phi_hat_exact(&|_: &[f64]| 1.25, &r, &x, 2).unwrap() - 1.25).abs() < 1e-13);
        let mc = phi_hat_mc(&|_: &[f64]| 1.25, &r, &x, 2, &McPlan::new(64, 8), SeedStream::new(1)).unwrap();
        assert!((mc.value - 1.25).abs() < 1e-13 && mc.std_error < 1e-13);
    }

    #[test]
    fn exponent_and_depth_checks() {
        assert!(RsbExponents::new(vec![0.0, 0.0, 1.0]).is_err());
        assert!(RsbExponents::new(vec![0.0, 0.6, 0.5, 1.0]).is_err());
        let t = two_leaf(0.5, 0.0, 1.0);
        let x = RsbExponents::new(vec![0.0, 0.3, 0.6, 1.0]).unwrap();
        assert!(matches!(phi_hat_exact(&|m: &[f64]| m[0], &t, &x, 1), Err(RsbError::GridMismatch(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = HierarchicalMeasure::random(&[4, 4], 1.0, &mut rng).unwrap();
        let x2 = RsbExponents::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert!(matches!(phi_hat_exact(&|_: &[f64]| 0.0, &big, &x2, 6), Err(RsbError::SizeGuard(_))));
    }

    #[test]
    fn path_sampling() {
        let chain = HierarchicalMeasure::single_leaf(3, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = sample_path(&chain, &mut rng);
        assert_eq!(p.nodes, vec![0, 1, 2, 3]);
        let t = HierarchicalMeasure::from_json(r#"{"w":[0.5,0.5],"children":[{"m":1},{"m":-1}]}"#).unwrap();
        let first = t.nodes_at(1)[0];
        let hits = (0..100_000).filter(|_| sample_path(&t, &mut rng).leaf() == first).count();
        assert!((hits as f64 / 1e5 - 0.5).abs() < 0.005);
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_path(&t, &mut a), sample_path(&t, &mut b));
    }

    #[test]
    fn zero_field_krsb() {
        let p = ModelParams::new(1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = HierarchicalMeasure::random(&[2, 2], 0.0, &mut rng).unwrap();
        let x = RsbExponents::new(vec![0.0, 0.4, 1.0]).unwrap();
        let v = krsb_functional(&t, &x, &p, CouplingPlan::Exact, &Evaluator::Exact, SeedStream::new(0)).unwrap();
        let expected = 4f64.ln() + 2.0 * 1f64.cosh().ln();
        assert!((v.value - expected).abs() < 1e-12);
    }
}
