//! Derivative-free minimization of the RS and K-RSB bounds.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cavity::{coupling_draws, rs_objective, CouplingPlan, ModelParams};
use crate::error::{Result, RsbError};
use crate::rsb_tree::{krsb_functional, Evaluator, HierarchicalMeasure, RsbExponents, TreeSpec};
use crate::stats::{EstimateWithError, SeedStream};

/// Largest `|m|` the RS search and the leaf encoding will reach.
const M_MAX: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsOptimum {
    pub m_star: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Minimizes `E_J[psi_v(m..m) - psi_e(m..m)]` over `m in [0, 1)`.
///
/// The objective is even in `m`. A coarse scan picks the bracket, then
/// golden-section search refines it.
pub fn optimize_rs(
    params: &ModelParams,
    couplings: CouplingPlan,
    budget: usize,
    seed: SeedStream,
) -> Result<RsOptimum> {
    if budget < 50 {
        return Err(RsbError::InvalidParameter(format!("RS search needs at least 50 evaluations, got {budget}")));
    }
    let draws = coupling_draws(params, couplings, seed)?;
    let f = |m: f64| rs_objective(params, &draws, m);
    let n_scan = (budget / 2).min(64);
    let grid: Vec<f64> = (0..n_scan).map(|i| M_MAX * i as f64 / (n_scan - 1) as f64).collect();
    let vals = grid.iter().map(|&m| f(m)).collect::<Result<Vec<_>>>()?;
    let mut evals = n_scan;
    let best = (0..n_scan).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n_scan - 1)]);
    let (mut m_best, mut v_best) = (grid[best], vals[best]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    evals += 2;
    while evals < budget && (b - a) > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
        evals += 1;
    }
    for (m, v) in [(c, fc), (d, fd)] {
        if v < v_best {
            m_best = m;
            v_best = v;
        }
    }
    Ok(RsOptimum { m_star: m_best, value: v_best, evaluations: evals })
}

/// Result of a Nelder-Mead run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub exhausted: bool,
    pub trace: Vec<(usize, f64)>,
}

/// Nelder-Mead with the standard coefficients. The returned point is the
/// best evaluated one, so the value never exceeds `f(x0)`.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: f64, max_evals: usize, ftol: f64) -> Result<NelderMeadResult>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let dim = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| -> Result<f64> {
        evals.set(evals.get() + 1);
        f(x)
    };
    let f0 = eval(x0)?;
    if dim == 0 {
        return Ok(NelderMeadResult { x: vec![], value: f0, evaluations: 1, exhausted: false, trace: vec![(0, f0)] });
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += step;
        let v = eval(&x)?;
        simplex.push((x, v));
    }
    let mut trace = Vec::new();
    let mut iter = 0;
    let mut exhausted = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        trace.push((iter, simplex[0].1));
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.abs() <= ftol * (1.0 + simplex[0].1.abs()) {
            break;
        }
        if evals.get() + dim + 2 > max_evals {
            exhausted = true;
            break;
        }
        iter += 1;
        let centroid: Vec<f64> =
            (0..dim).map(|k| simplex[..dim].iter().map(|p| p.0[k]).sum::<f64>() / dim as f64).collect();
        let worst = simplex[dim].clone();
        let along = |t: f64| -> Vec<f64> { (0..dim).map(|k| centroid[k] + t * (worst.0[k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr)?;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe)?;
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr < worst.1 {
                let x = along(-0.5);
                let v = eval(&x)?;
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x)?;
                (x, v)
            };
            if fc < worst.1.min(fr) {
                simplex[dim] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..dim).map(|k| best[k] + 0.5 * (p.0[k] - best[k])).collect();
                    let v = eval(&x)?;
                    *p = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Ok(NelderMeadResult { x, value, evaluations: evals.get(), exhausted, trace })
}

/// Unconstrained coordinates of a tree with fixed shape and its exponents:
/// cumulative-logistic logits for `x_1..x_K`, softmax logits (last fixed at
/// 0) for the weights of every internal node, `atanh` of every leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Reparam {
    branching: Vec<usize>,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Reparam {
    /// `branching[l]` children for every level-`l` node; the tree has depth
    /// `branching.len()` and `K = branching.len() - 1`.
    pub fn new(branching: Vec<usize>) -> Result<Self> {
        if branching.is_empty() || branching.contains(&0) {
            return Err(RsbError::InvalidParameter("branching must be non-empty and positive".into()));
        }
        Ok(Self { branching })
    }

    pub fn k(&self) -> usize {
        self.branching.len() - 1
    }

    fn nodes_per_level(&self) -> Vec<usize> {
        let mut v = vec![1];
        for &b in &self.branching {
            v.push(v.last().unwrap() * b);
        }
        v
    }

    pub fn dim(&self) -> usize {
        let npl = self.nodes_per_level();
        let weights: usize = (0..self.branching.len()).map(|l| npl[l] * (self.branching[l] - 1)).sum();
        self.k() + weights + npl[self.branching.len()]
    }

    pub fn decode(&self, theta: &[f64]) -> Result<(HierarchicalMeasure, RsbExponents)> {
        if theta.len() != self.dim() {
            return Err(RsbError::InvalidParameter(format!(
                "expected {} coordinates, got {}",
                self.dim(),
                theta.len()
            )));
        }
        let k = self.k();
        let mut x = vec![0.0];
        for &t in &theta[..k] {
            let prev = *x.last().unwrap();
            x.push(prev + (1.0 - prev) * sigmoid(t));
        }
        x.push(1.0);
        let mut pos = k;
        let npl = self.nodes_per_level();
        let mut weights: Vec<Vec<Vec<f64>>> = Vec::new();
        for (l, &b) in self.branching.iter().enumerate() {
            let mut level = Vec::new();
            for _ in 0..npl[l] {
                let logits = &theta[pos..pos + b - 1];
                pos += b - 1;
                let m = logits.iter().copied().fold(0.0, f64::max);
                let mut w: Vec<f64> = logits.iter().map(|t| (t - m).exp()).collect();
                w.push((-m).exp());
                let s: f64 = w.iter().sum();
                for v in &mut w {
                    *v /= s;
                }
                let head: f64 = w[..b - 1].iter().sum();
                w[b - 1] = 1.0 - head;
                level.push(w);
            }
            weights.push(level);
        }
        let leaves: Vec<f64> = theta[pos..].iter().map(|t| t.tanh()).collect();
        let mut counters = vec![0usize; self.branching.len()];
        let spec = self.build(0, &weights, &leaves, &mut counters, &mut 0);
        // clamp possible rounding of the cumulative logistic
        for i in 1..x.len() {
            x[i] = x[i].max(x[i - 1]).min(1.0);
        }
        Ok((HierarchicalMeasure::from_spec(&spec)?, RsbExponents::new(x)?))
    }

    fn build(
        &self,
        level: usize,
        weights: &[Vec<Vec<f64>>],
        leaves: &[f64],
        counters: &mut [usize],
        leaf: &mut usize,
    ) -> TreeSpec {
        if level == self.branching.len() {
            *leaf += 1;
            return TreeSpec::Leaf { m: leaves[*leaf - 1] };
        }
        let w = weights[level][counters[level]].clone();
        counters[level] += 1;
        let children =
            (0..self.branching[level]).map(|_| self.build(level + 1, weights, leaves, counters, leaf)).collect();
        TreeSpec::Internal { w, children }
    }

    pub fn encode(&self, tree: &HierarchicalMeasure, x: &RsbExponents) -> Result<Vec<f64>> {
        if tree.depth() != self.branching.len() || x.values().len() != tree.depth() + 1 {
            return Err(RsbError::GridMismatch("tree shape does not match the parameterization".into()));
        }
        let mut theta = Vec::with_capacity(self.dim());
        let xv = x.values();
        for l in 1..=self.k() {
            let frac = ((xv[l] - xv[l - 1]) / (1.0 - xv[l - 1])).clamp(1e-15, 1.0 - 1e-15);
            theta.push(logit(frac));
        }
        for l in 0..self.branching.len() {
            for &id in tree.nodes_at(l) {
                let w = tree.weights(id);
                if w.len() != self.branching[l] {
                    return Err(RsbError::GridMismatch("branching does not match the parameterization".into()));
                }
                let last = w[w.len() - 1];
                theta.extend(w[..w.len() - 1].iter().map(|v| (v / last).ln()));
            }
        }
        theta.extend(tree.leaf_values().iter().map(|m| m.clamp(-M_MAX, M_MAX).atanh()));
        Ok(theta)
    }
}

/// Budget of a K-RSB search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrsbBudget {
    pub max_evals: usize,
    pub couplings: CouplingPlan,
    pub evaluator: Evaluator,
    #[serde(default = "default_step")]
    pub step: f64,
}

fn default_step() -> f64 {
    0.5
}

impl Default for KrsbBudget {
    fn default() -> Self {
        Self { max_evals: 600, couplings: CouplingPlan::Exact, evaluator: Evaluator::Exact, step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub best: f64,
    pub digest: String,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KrsbOptimum {
    pub tree: TreeSpec,
    pub x: Vec<f64>,
    pub value: EstimateWithError,
    pub initial_value: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
    pub trace: Vec<TraceRow>,
}

fn digest(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for t in theta {
        h.update(t.to_le_bytes());
    }
    hex::encode(&h.finalize()[..6])
}

/// Starting tree for a search: uniform weights, leaves all equal to `m`.
pub fn uniform_tree(branching: &[usize], m: f64) -> Result<HierarchicalMeasure> {
    HierarchicalMeasure::regular(branching, |_, _| 1.0, |_| m)
}

/// Default exponents `x_l = l / (K + 1)`.
pub fn default_exponents(k: usize) -> RsbExponents {
    RsbExponents::new((0..=k + 1).map(|l| l as f64 / (k + 1) as f64).collect()).expect("valid exponents")
}

/// Nelder-Mead over the reparameterized tree and exponents. Starts from
/// `init` when given, else from a uniform tree with leaves `0.5`.
pub fn optimize_krsb(
    k: usize,
    branching: usize,
    params: &ModelParams,
    budget: &KrsbBudget,
    seed: SeedStream,
    init: Option<(HierarchicalMeasure, RsbExponents)>,
) -> Result<KrsbOptimum> {
    let rep = Reparam::new(vec![branching; k + 1])?;
    let (t0, x0) = match init {
        Some(p) => p,
        None => (uniform_tree(&vec![branching; k + 1], 0.5)?, default_exponents(k)),
    };
    let theta0 = rep.encode(&t0, &x0)?;
    let objective = |theta: &[f64]| -> Result<EstimateWithError> {
        let (t, x) = rep.decode(theta)?;
        krsb_functional(&t, &x, params, budget.couplings, &budget.evaluator, seed)
    };
    let initial = objective(&theta0)?;
    let nm = nelder_mead(|th| objective(th).map(|e| e.value), &theta0, budget.step, budget.max_evals, 1e-10)?;
    let (best_theta, best_value) = if nm.value <= initial.value { (nm.x, nm.value) } else { (theta0, initial.value) };
    let value = objective(&best_theta)?;
    debug_assert!((value.value - best_value).abs() < 1e-9 || value.std_error > 0.0);
    let (tree, x) = rep.decode(&best_theta)?;
    let d = digest(&best_theta);
    let trace = nm
        .trace
        .iter()
        .map(|&(iteration, best)| TraceRow { iteration, best, digest: d.clone(), se: value.std_error })
        .collect();
    Ok(KrsbOptimum {
        tree: tree.to_spec(),
        x: x.values().to_vec(),
        value,
        initial_value: initial.value,
        evaluations: nm.evaluations + 2,
        budget_exhausted: nm.exhausted,
        trace,
    })
}

/// Tree of depth `K+2` with the same value as `(tree, x)`: every level-1
/// node is replaced by `b` identical copies of itself under a new node, and
/// the new exponent is half of `x_1`.
pub fn deepen(tree: &HierarchicalMeasure, x: &RsbExponents, b: usize) -> Result<(HierarchicalMeasure, RsbExponents)> {
    let TreeSpec::Internal { w, children } = tree.to_spec() else {
        return Err(RsbError::InvalidParameter("root must be internal".into()));
    };
    let children =
        children.into_iter().map(|c| TreeSpec::Internal { w: vec![1.0 / b as f64; b], children: vec![c; b] }).collect();
    let xv = x.values();
    let mut nx = vec![0.0, 0.5 * xv[1]];
    nx.extend_from_slice(&xv[1..]);
    let spec = TreeSpec::Internal { w, children };
    // uniform weights may not sum to exactly one in floating point
    let spec = renormalize(spec);
    Ok((HierarchicalMeasure::from_spec(&spec)?, RsbExponents::new(nx)?))
}

fn renormalize(spec: TreeSpec) -> TreeSpec {
    match spec {
        TreeSpec::Leaf { m } => TreeSpec::Leaf { m },
        TreeSpec::Internal { mut w, children } => {
            let n = w.len();
            let head: f64 = w[..n - 1].iter().sum();
            w[n - 1] = 1.0 - head;
            TreeSpec::Internal { w, children: children.into_iter().map(renormalize).collect() }
        }
    }
}

/// Row of a refinement scan; `k = None` is the single-atom RS point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub k: Option<usize>,
    pub value: f64,
    pub se: f64,
    pub start_value: f64,
    pub evaluations: usize,
    pub budget: usize,
}

/// Best values for RS and each `K` in ascending order, each search warm
/// started at the embedding of the previous optimum.
pub fn refinement_scan(
    params: &ModelParams,
    k_list: &[usize],
    branching: usize,
    budget: &KrsbBudget,
    seed: SeedStream,
) -> Result<Vec<ScanRow>> {
    if k_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RsbError::InvalidParameter("K list must be strictly ascending".into()));
    }
    let rs = optimize_rs(params, budget.couplings, budget.max_evals.max(50), seed)?;
    let mut rows = vec![ScanRow {
        k: None,
        value: rs.value,
        se: 0.0,
        start_value: rs.value,
        evaluations: rs.evaluations,
        budget: budget.max_evals.max(50),
    }];
    let mut current: Option<(HierarchicalMeasure, RsbExponents)> = None;
    let mut current_k = 0;
    for &k in k_list {
        let mut start = match current.take() {
            None => (uniform_tree(&vec![branching; k + 1], rs.m_star)?, default_exponents(k)),
            Some(p) => p,
        };
        while start.1.k() < k {
            start = deepen(&start.0, &start.1, branching)?;
            current_k += 1;
        }
        let _ = current_k;
        let opt = optimize_krsb(k, branching, params, budget, seed, Some(start))?;
        let tree = HierarchicalMeasure::from_spec(&opt.tree)?;
        let x = RsbExponents::new(opt.x.clone())?;
        rows.push(ScanRow {
            k: Some(k),
            value: opt.value.value,
            se: opt.value.std_error,
            start_value: opt.initial_value,
            evaluations: opt.evaluations,
            budget: budget.max_evals,
        });
        current = Some((tree, x));
    }
    Ok(rows)
}
