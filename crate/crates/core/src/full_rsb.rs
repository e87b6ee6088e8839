//! Full-RSB functional on tree-embedded cavity magnetizations, and the
//! finite-vs-full equivalence experiments.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cavity::{coupling_draws, CavityKernel, CouplingPlan, CouplingSample, ModelParams};
use crate::error::{Result, RsbError};
use crate::nested::{self, Channels, LevelDiagnostics, McPlan, NestedModel};
use crate::parisi_measure::DiscreteParisiMeasure;
use crate::rsb_tree::{average_over_couplings, phi_hat_exact, HierarchicalMeasure, RsbExponents};
use crate::stats::{z_score, EstimateWithError, SeedStream};
use crate::wiener::{draw_level, normal_cdf, LevelNoise, NoiseMode};

/// Default number of Brownian sub-steps per unit of `q`.
pub const DEFAULT_MESH: usize = 16;

/// Cavity magnetization `m(omega)` given by embedding a tree on a grid
/// `q_0..q_{K+1}`: the level-`l` node picks its child with the increment
/// of `omega` over `[q_{l-1}, q_l]` (`omega(0)` for `l = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct CavityMagnetizationSpec {
    pub tree: HierarchicalMeasure,
    pub grid: Vec<f64>,
}

impl CavityMagnetizationSpec {
    pub fn new(tree: HierarchicalMeasure, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != tree.depth() + 1 {
            return Err(RsbError::GridMismatch(format!(
                "tree of depth {} needs {} grid points, got {}",
                tree.depth(),
                tree.depth() + 1,
                grid.len()
            )));
        }
        if grid[0] != 0.0 || *grid.last().unwrap() != 1.0 || grid.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(RsbError::InvalidParameter("grid must run non-decreasing from 0 to 1".into()));
        }
        Ok(Self { tree, grid })
    }
}

/// Measure `(q_l, x_l)` built from a grid and tree exponents.
pub fn measure_from(grid: &[f64], x: &RsbExponents) -> Result<DiscreteParisiMeasure> {
    DiscreteParisiMeasure::from_grid(grid, &x.values()[1..])
}

/// Maps the levels of the measure onto the levels of the magnetization grid.
#[derive(Debug, Clone)]
struct LevelMap {
    /// For every measure level `j`: the tree level it closes, if any.
    closes: Vec<Option<usize>>,
    /// For every spec level `l >= 1`: measure levels inside `[q_{l-1}, q_l]`.
    members: Vec<Vec<usize>>,
}

fn level_map(spec_grid: &[f64], mu_grid: &[f64]) -> Result<LevelMap> {
    let mut closes = vec![None; mu_grid.len()];
    let mut members = vec![Vec::new(); spec_grid.len()];
    let mut j = 1;
    for l in 1..spec_grid.len() {
        let start = j;
        while j < mu_grid.len() && mu_grid[j] < spec_grid[l] {
            j += 1;
        }
        if j == mu_grid.len() || mu_grid[j] != spec_grid[l] {
            return Err(RsbError::GridMismatch(format!(
                "measure grid does not contain magnetization grid point {}",
                spec_grid[l]
            )));
        }
        members[l] = (start..=j).collect();
        closes[j] = Some(l);
        j += 1;
    }
    Ok(LevelMap { closes, members })
}

struct FullRsbModel<'a> {
    spec: &'a CavityMagnetizationSpec,
    mu_grid: &'a [f64],
    map: LevelMap,
    kernel: CavityKernel,
    n: usize,
    mode: NoiseMode,
    last_active: usize,
}

#[derive(Clone)]
struct FullState {
    noise: LevelNoise,
    /// `nodes[level * n + copy]`, tree levels `0..=depth`
    nodes: Vec<usize>,
}

const MAX_COPIES: usize = 64;

impl FullRsbModel<'_> {
    fn spec_z(&self, s: &FullState, copy: usize, l: usize) -> f64 {
        let members = &self.map.members[l];
        if members.len() == 1 {
            return s.noise.z(copy, members[0]);
        }
        let (mut num, mut den) = (0.0, 0.0);
        for &j in members {
            let dq = (self.mu_grid[j] - self.mu_grid[j - 1]).max(0.0);
            num += dq.sqrt() * s.noise.z(copy, j);
            den += dq;
        }
        if den > 0.0 {
            num / den.sqrt()
        } else {
            s.noise.z(copy, *members.last().unwrap())
        }
    }
}

impl NestedModel for FullRsbModel<'_> {
    type State = FullState;

    fn n_levels(&self) -> usize {
        self.mu_grid.len() - 1
    }

    fn new_state(&self) -> FullState {
        let depth = self.spec.tree.depth();
        let mut nodes = vec![0; (depth + 1) * self.n];
        nodes[..self.n].fill(self.spec.tree.root());
        FullState { noise: LevelNoise::zeros(self.n, self.mu_grid.len()), nodes }
    }

    fn draw(&self, s: &mut FullState, level: usize, rng: &mut ChaCha8Rng) {
        draw_level(&mut s.noise, level, self.mode, self.mu_grid, rng);
        let tree_level = if level == 0 { Some(0) } else { self.map.closes[level] };
        let Some(l) = tree_level else { return };
        let depth = self.spec.tree.depth();
        if l >= depth {
            return;
        }
        let n = self.n;
        for c in 0..n {
            let z = if l == 0 { s.noise.z(c, 0) } else { self.spec_z(s, c, l) };
            let parent = s.nodes[l * n + c];
            s.nodes[(l + 1) * n + c] = self.spec.tree.child_by_uniform(parent, normal_cdf(z));
        }
    }

    fn level_active(&self, level: usize) -> bool {
        level <= self.last_active
    }

    fn terminal(&self, s: &FullState, values: &mut [f64], _dirs: &mut [f64]) {
        let n = self.n;
        let d = self.spec.tree.depth();
        let mut m = [0.0; MAX_COPIES];
        for c in 0..n {
            m[c] = self.spec.tree.leaf_value(s.nodes[d * n + c]);
        }
        values[0] = self.kernel.vertex(&m[..n]);
        values[1] = self.kernel.edge(&m[..n]);
    }
}

/// Estimate of the full-RSB functional with its per-coupling parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullRsbResult {
    pub estimate: EstimateWithError,
    pub per_coupling: Vec<EstimateWithError>,
    /// Diagnostics of the vertex channel for the first coupling draw.
    pub levels: Vec<LevelDiagnostics>,
}

/// `P(m, mu)` for fixed couplings: averages over `couplings`, each with
/// `plan.outer` outer samples and common random numbers across the vertex
/// and edge terms.
pub fn full_rsb_for_couplings(
    m_spec: &CavityMagnetizationSpec,
    mu: &DiscreteParisiMeasure,
    params: &ModelParams,
    couplings: &[CouplingSample],
    plan: &McPlan,
    seed: SeedStream,
    mode: NoiseMode,
) -> Result<(Vec<EstimateWithError>, Vec<LevelDiagnostics>)> {
    let n = params.n_fields();
    if n > MAX_COPIES {
        return Err(RsbError::InvalidParameter(format!("at most {MAX_COPIES} cavity fields supported")));
    }
    let map = level_map(&m_spec.grid, mu.q())?;
    let depth = m_spec.tree.depth();
    // last measure level that feeds a tree choice with more than one child
    let mut last_active = 0;
    for l in 1..depth {
        let branching = m_spec.tree.nodes_at(l).iter().any(|&id| m_spec.tree.children(id).len() > 1);
        if branching {
            last_active = *map.members[l].last().unwrap();
        }
    }
    let channels = Channels::same_exponents(2, &mu.x()[1..]);
    let mut per_j = Vec::with_capacity(couplings.len());
    let mut levels = Vec::new();
    for (k, j) in couplings.iter().enumerate() {
        let model = FullRsbModel {
            spec: m_spec,
            mu_grid: mu.q(),
            map: map.clone(),
            kernel: CavityKernel::new(params, j)?,
            n,
            mode,
            last_active,
        };
        let out = nested::run(&model, &channels, plan, seed.substream(k as u64))?;
        if k == 0 {
            levels = out.levels.clone();
        }
        per_j.push(out.contrast(&[(0, 1.0), (1, -1.0)]));
    }
    Ok((per_j, levels))
}

/// `E_J[Phi(psi_v o m) - Phi(psi_e o m)]`.
pub fn full_rsb_run(
    m_spec: &CavityMagnetizationSpec,
    mu: &DiscreteParisiMeasure,
    params: &ModelParams,
    couplings: CouplingPlan,
    plan: &McPlan,
    seed: SeedStream,
    mode: NoiseMode,
) -> Result<FullRsbResult> {
    let draws = coupling_draws(params, couplings, seed.substream(0))?;
    let (per_coupling, levels) = full_rsb_for_couplings(m_spec, mu, params, &draws, plan, seed.substream(1), mode)?;
    Ok(FullRsbResult { estimate: average_over_couplings(&per_coupling, couplings), per_coupling, levels })
}

pub fn full_rsb_functional(
    m_spec: &CavityMagnetizationSpec,
    mu: &DiscreteParisiMeasure,
    params: &ModelParams,
    couplings: CouplingPlan,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<EstimateWithError> {
    Ok(full_rsb_run(m_spec, mu, params, couplings, plan, seed, NoiseMode::Normalized)?.estimate)
}

/// Sampling budget of the equivalence experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub couplings: CouplingPlan,
    /// Outer samples in total, split evenly over coupling draws.
    pub total_outer: usize,
    pub inner: Vec<usize>,
    #[serde(default = "default_true")]
    pub bias_correction: bool,
}

fn default_true() -> bool {
    true
}

impl Default for Budgets {
    fn default() -> Self {
        Self { couplings: CouplingPlan::Exact, total_outer: 100_000, inner: vec![64], bias_correction: true }
    }
}

impl Budgets {
    fn plan_for(&self, n_draws: usize) -> McPlan {
        McPlan {
            outer: self.total_outer.div_ceil(n_draws).max(2),
            inner: self.inner.clone(),
            bias_correction: self.bias_correction,
        }
    }
}

/// `{"p_hat_k", "p_full", "se", "z"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub p_hat_k: f64,
    pub p_full: f64,
    pub se: f64,
    pub z: f64,
    pub passed: bool,
}

/// Exact tree DP against the Wiener Monte Carlo on the same couplings.
pub fn equivalence_check(
    tree: &HierarchicalMeasure,
    x: &RsbExponents,
    q_grid: &[f64],
    params: &ModelParams,
    budgets: &Budgets,
    seed: SeedStream,
) -> Result<EquivalenceReport> {
    let spec = CavityMagnetizationSpec::new(tree.clone(), q_grid.to_vec())?;
    let mu = measure_from(q_grid, x)?;
    let draws = coupling_draws(params, budgets.couplings, seed.substream(0))?;
    let n = params.n_fields();
    let mut exact = 0.0;
    for j in &draws {
        let k = CavityKernel::new(params, j)?;
        exact +=
            phi_hat_exact(&|m: &[f64]| k.vertex(m), tree, x, n)? - phi_hat_exact(&|m: &[f64]| k.edge(m), tree, x, n)?;
    }
    exact /= draws.len() as f64;
    let plan = budgets.plan_for(draws.len());
    let (per_j, _) =
        full_rsb_for_couplings(&spec, &mu, params, &draws, &plan, seed.substream(1), NoiseMode::Normalized)?;
    let mc = average_over_couplings(&per_j, CouplingPlan::Exact);
    let z = z_score(mc.value - exact, mc.std_error);
    Ok(EquivalenceReport { p_hat_k: exact, p_full: mc.value, se: mc.std_error, z, passed: z.abs() <= 3.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QInvarianceReport {
    pub p_a: EstimateWithError,
    pub p_b: EstimateWithError,
    pub combined_se: f64,
    pub z: f64,
    pub passed: bool,
}

/// Same tree and exponents on two grids. Noise is drawn as Brownian
/// sub-steps so different grids see different realizations from the same
/// seed; identical grids reproduce each other exactly.
pub fn q_invariance_check(
    tree: &HierarchicalMeasure,
    x: &RsbExponents,
    params: &ModelParams,
    grid_a: &[f64],
    grid_b: &[f64],
    budgets: &Budgets,
    seed: SeedStream,
) -> Result<QInvarianceReport> {
    for g in [grid_a, grid_b] {
        if g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RsbError::InvalidParameter("grids must be strictly increasing".into()));
        }
    }
    let draws = coupling_draws(params, budgets.couplings, seed.substream(0))?;
    let plan = budgets.plan_for(draws.len());
    let mode = NoiseMode::BrownianPath { mesh: DEFAULT_MESH };
    let run = |g: &[f64]| -> Result<EstimateWithError> {
        let spec = CavityMagnetizationSpec::new(tree.clone(), g.to_vec())?;
        let mu = measure_from(g, x)?;
        let (per_j, _) = full_rsb_for_couplings(&spec, &mu, params, &draws, &plan, seed.substream(1), mode)?;
        Ok(average_over_couplings(&per_j, CouplingPlan::Exact))
    };
    let p_a = run(grid_a)?;
    let p_b = run(grid_b)?;
    let combined_se = p_a.combined_se(&p_b);
    let z = z_score(p_a.value - p_b.value, combined_se);
    Ok(QInvarianceReport { p_a, p_b, combined_se, z, passed: z.abs() <= 3.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_map_on_refined_grid() {
        let m = level_map(&[0.0, 0.5, 1.0], &[0.0, 0.2, 0.5, 0.8, 1.0]).unwrap();
        assert_eq!(m.members[1], vec![1, 2]);
        assert_eq!(m.members[2], vec![3, 4]);
        assert_eq!(m.closes, vec![None, None, Some(1), None, Some(2)]);
        assert!(level_map(&[0.0, 0.5, 1.0], &[0.0, 0.4, 1.0]).is_err());
    }

    #[test]
    fn zero_field_is_exact() {
        let p = ModelParams::new(1.0, 2).unwrap();
        let t = HierarchicalMeasure::regular(&[1, 2, 2], |_, i| 1.0 + i as f64, |_| 0.0).unwrap();
        let spec = CavityMagnetizationSpec::new(t, vec![0.0, 0.4, 0.7, 1.0]).unwrap();
        let mu = DiscreteParisiMeasure::new(vec![(0.0, 0.0), (0.4, 0.3), (0.7, 0.6), (1.0, 1.0)]).unwrap();
        let v =
            full_rsb_functional(&spec, &mu, &p, CouplingPlan::Exact, &McPlan::new(16, 4), SeedStream::new(2)).unwrap();
        let expected = 4f64.ln() + 2.0 * 1f64.cosh().ln();
        assert!((v.value - expected).abs() < 1e-12);
        assert!(v.std_error < 1e-12);
    }
}
