//! Wiener-space side of the functional.
//!
//! A discrete Parisi measure with levels `(q_l, x_l)` defines the backward
//! recursion
//!
//! ```text
//! phi_{K+1} = Psi
//! phi_l     = (1/x_{l+1}) log E[exp(x_{l+1} phi_{l+1}) | z_0..z_l]
//! Phi       = E[phi_0]
//! ```
//!
//! over per-level standard normals `z_0..z_{K+1}` (`z_0` is `omega(0)`, the
//! others are normalized increments). A level with `x = 0` is a plain
//! conditional mean. Trees are embedded by selecting the level-`l+1` node
//! with `u_l = NormalCdf(z_l)`, so a tree of depth `K+1` reads `z_0..z_K`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsbError};
use crate::nested::{self, Channels, LevelDiagnostics, McPlan, NestedModel, NestedOutput};
use crate::parisi_measure::DiscreteParisiMeasure;
use crate::rsb_tree::{HierarchicalMeasure, TreePath};
use crate::stats::{EstimateWithError, RunningStats, SeedStream};

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// How the per-level normals are produced from the random stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum NoiseMode {
    /// One standard normal per level.
    #[default]
    Normalized,
    /// Each increment is built from `max(1, round(dq * mesh))` Brownian
    /// sub-steps on a fine mesh and then normalized. Same law, but the
    /// realization depends on the grid.
    BrownianPath { mesh: usize },
}

/// `z[copy][level]`, levels `0..=K+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelNoise {
    n_copies: usize,
    n_levels: usize,
    z: Vec<f64>,
}

impl LevelNoise {
    pub fn zeros(n_copies: usize, n_levels: usize) -> Self {
        Self { n_copies, n_levels, z: vec![0.0; n_copies * n_levels] }
    }

    pub fn from_values(values: Vec<Vec<f64>>) -> Result<Self> {
        let n_copies = values.len();
        let n_levels = values.first().map_or(0, |v| v.len());
        if values.iter().any(|v| v.len() != n_levels) || values.iter().flatten().any(|z| !z.is_finite()) {
            return Err(RsbError::InvalidParameter("noise must be a finite rectangular array".into()));
        }
        Ok(Self { n_copies, n_levels, z: values.concat() })
    }

    pub fn sample<R: Rng + ?Sized>(n_copies: usize, n_levels: usize, rng: &mut R) -> Self {
        let z = (0..n_copies * n_levels).map(|_| StandardNormal.sample(rng)).collect();
        Self { n_copies, n_levels, z }
    }

    pub fn n_copies(&self) -> usize {
        self.n_copies
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn z(&self, copy: usize, level: usize) -> f64 {
        self.z[copy * self.n_levels + level]
    }

    pub fn set(&mut self, copy: usize, level: usize, v: f64) {
        self.z[copy * self.n_levels + level] = v;
    }

    pub fn copy(&self, copy: usize) -> &[f64] {
        &self.z[copy * self.n_levels..(copy + 1) * self.n_levels]
    }

    /// `omega(q_l)` for one copy on `grid = q_0..q_{K+1}`.
    pub fn path(&self, copy: usize, grid: &[f64]) -> Vec<f64> {
        let z = self.copy(copy);
        let mut w = z[0];
        let mut out = vec![w];
        for l in 1..grid.len().min(self.n_levels) {
            w += (grid[l] - grid[l - 1]).max(0.0).sqrt() * z[l];
            out.push(w);
        }
        out
    }
}

/// `u_l = NormalCdf(z_l)` for one copy.
pub fn u_process(noise: &LevelNoise, copy: usize) -> Vec<f64> {
    noise.copy(copy).iter().map(|&z| normal_cdf(z)).collect()
}

/// Tree plus its per-node cumulative thresholds in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct WienerEmbedding {
    tree: HierarchicalMeasure,
}

impl WienerEmbedding {
    pub fn new(tree: HierarchicalMeasure) -> Self {
        Self { tree }
    }

    pub fn tree(&self) -> &HierarchicalMeasure {
        &self.tree
    }

    pub fn thresholds(&self, node: usize) -> &[f64] {
        self.tree.cumulative(node)
    }
}

/// Inverse-CDF walk: `u_l` picks the child of the level-`l` node.
/// Needs `depth + 1` uniforms; the last one is not used.
pub fn embed_tree(embedding: &WienerEmbedding, uniforms: &[f64]) -> Result<TreePath> {
    let t = &embedding.tree;
    if uniforms.len() != t.depth() + 1 {
        return Err(RsbError::GridMismatch(format!(
            "tree of depth {} needs {} uniforms, got {}",
            t.depth(),
            t.depth() + 1,
            uniforms.len()
        )));
    }
    let mut nodes = vec![t.root()];
    for &u in &uniforms[..t.depth()] {
        nodes.push(t.child_by_uniform(*nodes.last().unwrap(), u));
    }
    Ok(TreePath { nodes })
}

/// A bounded functional of the per-level noise of `n` copies.
pub trait WienerFunctional: Sync {
    fn n_copies(&self) -> usize;

    /// Highest noise level the functional reads.
    fn max_level(&self) -> usize;

    fn eval(&self, noise: &LevelNoise) -> f64;

    /// A-priori bound on `|Psi|`, if known.
    fn sup_bound(&self) -> Option<f64> {
        None
    }
}

/// `psi(leaf values)` with the leaves chosen by the embedding of each copy.
pub struct TreeFunctional<'a, F> {
    pub embedding: &'a WienerEmbedding,
    pub n: usize,
    pub psi: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> WienerFunctional for TreeFunctional<'_, F> {
    fn n_copies(&self) -> usize {
        self.n
    }

    fn max_level(&self) -> usize {
        self.embedding.tree.depth() - 1
    }

    fn eval(&self, noise: &LevelNoise) -> f64 {
        let t = &self.embedding.tree;
        let leaves: Vec<f64> = (0..self.n)
            .map(|c| {
                let mut node = t.root();
                for l in 0..t.depth() {
                    node = t.child_by_uniform(node, normal_cdf(noise.z(c, l)));
                }
                t.leaf_value(node)
            })
            .collect();
        (self.psi)(&leaves)
    }
}

/// Sum of `a_i tanh(b_i . z + c_i)` over features; `|Psi| <= sum |a_i|`.
/// Used as a family of smooth bounded test functionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanhFeatures {
    pub n_copies: usize,
    pub n_levels: usize,
    pub a: Vec<f64>,
    /// `b[i][copy * n_levels + level]`
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl TanhFeatures {
    pub fn random<R: Rng + ?Sized>(n_copies: usize, n_levels: usize, features: usize, scale: f64, rng: &mut R) -> Self {
        let d = n_copies * n_levels;
        Self {
            n_copies,
            n_levels,
            a: (0..features).map(|_| rng.gen_range(-scale..scale)).collect(),
            b: (0..features).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            c: (0..features).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }

    /// `lambda * self + (1 - lambda) * other` as one feature list.
    pub fn mix(&self, lambda: f64, other: &Self) -> Self {
        let mut out = self.clone();
        for a in &mut out.a {
            *a *= lambda;
        }
        out.a.extend(other.a.iter().map(|a| a * (1.0 - lambda)));
        out.b.extend(other.b.iter().cloned());
        out.c.extend(other.c.iter().copied());
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for a in &mut out.a {
            *a *= s;
        }
        out
    }
}

impl WienerFunctional for TanhFeatures {
    fn n_copies(&self) -> usize {
        self.n_copies
    }

    fn max_level(&self) -> usize {
        self.n_levels - 1
    }

    fn eval(&self, noise: &LevelNoise) -> f64 {
        let mut s = 0.0;
        for i in 0..self.a.len() {
            let mut arg = self.c[i];
            for copy in 0..self.n_copies {
                for l in 0..self.n_levels {
                    arg += self.b[i][copy * self.n_levels + l] * noise.z(copy, l);
                }
            }
            s += self.a[i] * arg.tanh();
        }
        s
    }

    fn sup_bound(&self) -> Option<f64> {
        Some(self.a.iter().map(|a| a.abs()).sum())
    }
}

/// `Psi = z` of one copy at one level.
#[derive(Debug, Clone, Copy)]
pub struct LevelCoordinate {
    pub level: usize,
}

impl WienerFunctional for LevelCoordinate {
    fn n_copies(&self) -> usize {
        1
    }

    fn max_level(&self) -> usize {
        self.level
    }

    fn eval(&self, noise: &LevelNoise) -> f64 {
        noise.z(0, self.level)
    }
}

/// `Psi = g(omega(1))` for one copy on the measure's grid.
pub struct TerminalValue<'a, G> {
    pub grid: &'a [f64],
    pub g: G,
}

impl<G: Fn(f64) -> f64 + Sync> WienerFunctional for TerminalValue<'_, G> {
    fn n_copies(&self) -> usize {
        1
    }

    fn max_level(&self) -> usize {
        self.grid.len() - 1
    }

    fn eval(&self, noise: &LevelNoise) -> f64 {
        (self.g)(*noise.path(0, self.grid).last().unwrap())
    }
}

/// Fills the noise of one level for every copy.
pub(crate) fn draw_level(noise: &mut LevelNoise, level: usize, mode: NoiseMode, grid: &[f64], rng: &mut ChaCha8Rng) {
    for copy in 0..noise.n_copies() {
        let z = match mode {
            NoiseMode::BrownianPath { mesh } if level > 0 => {
                let dq = (grid[level] - grid[level - 1]).max(0.0);
                let steps = ((dq * mesh as f64).round() as usize).max(1);
                let s: f64 = (0..steps).map(|_| -> f64 { StandardNormal.sample(rng) }).sum::<f64>();
                s / (steps as f64).sqrt()
            }
            _ => StandardNormal.sample(rng),
        };
        noise.set(copy, level, z);
    }
}

/// Channel set over generic functionals sharing one noise array.
struct FunctionalModel<'a> {
    functionals: Vec<&'a dyn WienerFunctional>,
    direction: Option<&'a dyn WienerFunctional>,
    n_copies: usize,
    grid: Vec<f64>,
    mode: NoiseMode,
    max_level: usize,
}

impl<'a> FunctionalModel<'a> {
    fn new(
        functionals: Vec<&'a dyn WienerFunctional>,
        direction: Option<&'a dyn WienerFunctional>,
        mu: &DiscreteParisiMeasure,
        mode: NoiseMode,
    ) -> Result<Self> {
        let n_copies = functionals[0].n_copies();
        let n_levels = mu.q().len();
        let all = functionals.iter().copied().chain(direction);
        let mut max_level = 0;
        for f in all {
            if f.n_copies() != n_copies {
                return Err(RsbError::InvalidParameter("functionals disagree on the number of copies".into()));
            }
            if f.max_level() >= n_levels {
                return Err(RsbError::GridMismatch(format!(
                    "functional reads level {} but the measure has levels 0..={}",
                    f.max_level(),
                    n_levels - 1
                )));
            }
            max_level = max_level.max(f.max_level());
        }
        Ok(Self { functionals, direction, n_copies, grid: mu.q().to_vec(), mode, max_level })
    }
}

impl NestedModel for FunctionalModel<'_> {
    type State = LevelNoise;

    fn n_levels(&self) -> usize {
        self.grid.len() - 1
    }

    fn new_state(&self) -> LevelNoise {
        LevelNoise::zeros(self.n_copies, self.grid.len())
    }

    fn draw(&self, s: &mut LevelNoise, level: usize, rng: &mut ChaCha8Rng) {
        draw_level(s, level, self.mode, &self.grid, rng);
    }

    fn level_active(&self, level: usize) -> bool {
        level <= self.max_level
    }

    fn terminal(&self, s: &LevelNoise, values: &mut [f64], dirs: &mut [f64]) {
        for (c, f) in self.functionals.iter().enumerate() {
            values[c] = f.eval(s);
        }
        if let Some(d) = self.direction {
            dirs[0] = d.eval(s);
        }
    }
}

fn measure_exponents(mu: &DiscreteParisiMeasure) -> Vec<f64> {
    mu.x()[1..].to_vec()
}

/// `Phi(Psi, mu, 0)` by nested Monte Carlo.
pub fn rsb_expectation(
    psi: &dyn WienerFunctional,
    mu: &DiscreteParisiMeasure,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<EstimateWithError> {
    Ok(rsb_expectation_run(&[psi], mu, plan, seed, NoiseMode::Normalized)?.estimate(0))
}

/// Several functionals on shared noise; channel `i` is `psis[i]`.
pub fn rsb_expectation_run(
    psis: &[&dyn WienerFunctional],
    mu: &DiscreteParisiMeasure,
    plan: &McPlan,
    seed: SeedStream,
    mode: NoiseMode,
) -> Result<NestedOutput> {
    if psis.is_empty() {
        return Err(RsbError::InvalidParameter("no functionals".into()));
    }
    let model = FunctionalModel::new(psis.to_vec(), None, mu, mode)?;
    let ch = Channels::same_exponents(psis.len(), &measure_exponents(mu));
    nested::run(&model, &ch, plan, seed)
}

/// The same functional under several measures sharing one grid.
pub fn rsb_expectation_measures(
    psi: &dyn WienerFunctional,
    mus: &[&DiscreteParisiMeasure],
    plan: &McPlan,
    seed: SeedStream,
) -> Result<NestedOutput> {
    let grid = mus[0].q();
    if mus.iter().any(|m| m.q() != grid) {
        return Err(RsbError::GridMismatch("measures must share breakpoints; refine first".into()));
    }
    let model = FunctionalModel::new(vec![psi], None, mus[0], NoiseMode::Normalized)?;
    let model = FunctionalModel { functionals: vec![psi; mus.len()], ..model };
    let ch = Channels {
        exponents: mus.iter().map(|m| measure_exponents(m)).collect(),
        exponent_directions: None,
        track_psi_direction: false,
    };
    nested::run(&model, &ch, plan, seed)
}

/// Exponential weight along one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GirsanovWeight {
    pub weight: f64,
    pub log_weight: f64,
}

/// `exp(sum_{l>=1} x_l (phi_l - phi_{l-1}))` for `phi_0..phi_{K+1}` and
/// `x_0..x_{K+1}`.
pub fn girsanov_weight(phi_levels: &[f64], x: &[f64]) -> Result<GirsanovWeight> {
    if phi_levels.len() != x.len() {
        return Err(RsbError::GridMismatch(format!("{} phi values for {} exponents", phi_levels.len(), x.len())));
    }
    if phi_levels.iter().any(|p| !p.is_finite()) {
        return Err(RsbError::Domain("phi values must be finite".into()));
    }
    let log_weight: f64 = (1..x.len()).map(|l| x[l] * (phi_levels[l] - phi_levels[l - 1])).sum();
    Ok(GirsanovWeight { weight: log_weight.exp(), log_weight })
}

/// Result of a derivative evaluation with its finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub formula: EstimateWithError,
    pub finite_difference: EstimateWithError,
    /// Central difference at half the step.
    pub finite_difference_half: EstimateWithError,
    pub step: f64,
    pub combined_se: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl DerivativeCheck {
    fn from_output(out: &NestedOutput, formula: EstimateWithError, t: f64) -> Self {
        let fd = out.contrast(&[(1, 0.5 / t), (2, -0.5 / t)]);
        let half = out.contrast(&[(3, 1.0 / t), (4, -1.0 / t)]);
        let combined_se = formula.combined_se(&fd);
        let tolerance = (0.02 * formula.value.abs()).max(3.0 * combined_se);
        log::info!("derivative check: formula {:.6} fd {:.6} fd(t/2) {:.6}", formula.value, fd.value, half.value);
        Self {
            formula,
            finite_difference: fd,
            finite_difference_half: half,
            step: t,
            combined_se,
            tolerance,
            passed: (formula.value - fd.value).abs() <= tolerance,
        }
    }
}

/// Sum of two functionals `Psi + s * dPsi`.
struct Shifted<'a> {
    base: &'a dyn WienerFunctional,
    dir: &'a dyn WienerFunctional,
    s: f64,
}

impl WienerFunctional for Shifted<'_> {
    fn n_copies(&self) -> usize {
        self.base.n_copies()
    }

    fn max_level(&self) -> usize {
        self.base.max_level().max(self.dir.max_level())
    }

    fn eval(&self, noise: &LevelNoise) -> f64 {
        self.base.eval(noise) + self.s * self.dir.eval(noise)
    }
}

/// `E[W dPsi]` with the Girsanov weight accumulated along the recursion.
pub fn derivative_in_psi(
    psi: &dyn WienerFunctional,
    delta_psi: &dyn WienerFunctional,
    mu: &DiscreteParisiMeasure,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<EstimateWithError> {
    let model = FunctionalModel::new(vec![psi], Some(delta_psi), mu, NoiseMode::Normalized)?;
    let mut ch = Channels::same_exponents(1, &measure_exponents(mu));
    ch.track_psi_direction = true;
    Ok(nested::run(&model, &ch, plan, seed)?.d_psi(0))
}

/// Formula and central finite differences at `t` and `t/2`, all on shared noise.
pub fn derivative_check_psi(
    psi: &dyn WienerFunctional,
    delta_psi: &dyn WienerFunctional,
    mu: &DiscreteParisiMeasure,
    t: f64,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<DerivativeCheck> {
    let shifted: Vec<Shifted> =
        [t, -t, 0.5 * t, -0.5 * t].iter().map(|&s| Shifted { base: psi, dir: delta_psi, s }).collect();
    let mut fs: Vec<&dyn WienerFunctional> = vec![psi];
    fs.extend(shifted.iter().map(|s| s as &dyn WienerFunctional));
    let model = FunctionalModel::new(fs, Some(delta_psi), mu, NoiseMode::Normalized)?;
    let mut ch = Channels::same_exponents(5, &measure_exponents(mu));
    ch.track_psi_direction = true;
    let out = nested::run(&model, &ch, plan, seed)?;
    Ok(DerivativeCheck::from_output(&out, out.d_psi(0), t))
}

fn mu_direction(mu: &DiscreteParisiMeasure, mu_prime: &DiscreteParisiMeasure) -> Result<Vec<f64>> {
    if mu.q() != mu_prime.q() {
        return Err(RsbError::GridMismatch("measures must share breakpoints; refine first".into()));
    }
    let dx: Vec<f64> = mu_prime.x()[1..].iter().zip(&mu.x()[1..]).map(|(a, b)| a - b).collect();
    if mu.x()[1..].iter().zip(&dx).any(|(&x, &d)| x == 0.0 && d != 0.0) {
        return Err(RsbError::InvalidParameter("direction moves a level where x = 0".into()));
    }
    Ok(dx)
}

/// Derivative of `Phi(Psi, mu + t (mu' - mu))` at `t = 0`:
/// `sum_l (dx_l / x_l) E~[phi_l - phi_{l-1}]` under the tilted measure.
pub fn derivative_in_mu(
    psi: &dyn WienerFunctional,
    mu: &DiscreteParisiMeasure,
    mu_prime: &DiscreteParisiMeasure,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<EstimateWithError> {
    let dx = mu_direction(mu, mu_prime)?;
    let model = FunctionalModel::new(vec![psi], None, mu, NoiseMode::Normalized)?;
    let ch = Channels {
        exponents: vec![measure_exponents(mu)],
        exponent_directions: Some(vec![dx]),
        track_psi_direction: false,
    };
    Ok(nested::run(&model, &ch, plan, seed)?.d_mu(0))
}

/// Formula and central finite differences in the exponents, on shared noise.
pub fn derivative_check_mu(
    psi: &dyn WienerFunctional,
    mu: &DiscreteParisiMeasure,
    mu_prime: &DiscreteParisiMeasure,
    t: f64,
    plan: &McPlan,
    seed: SeedStream,
) -> Result<DerivativeCheck> {
    let dx = mu_direction(mu, mu_prime)?;
    let x = measure_exponents(mu);
    let at = |s: f64| -> Vec<f64> { x.iter().zip(&dx).map(|(a, d)| (a + s * d).clamp(0.0, 1.0)).collect() };
    let model = FunctionalModel::new(vec![psi; 5], None, mu, NoiseMode::Normalized)?;
    let zeros = vec![0.0; dx.len()];
    let ch = Channels {
        exponents: vec![x.clone(), at(t), at(-t), at(0.5 * t), at(-0.5 * t)],
        exponent_directions: Some(vec![dx.clone(), zeros.clone(), zeros.clone(), zeros.clone(), zeros]),
        track_psi_direction: false,
    };
    let out = nested::run(&model, &ch, plan, seed)?;
    Ok(DerivativeCheck::from_output(&out, out.d_mu(0), t))
}

/// CSV with columns `level,x_l,mean_delta_phi,weight_mean,weight_se`.
pub fn diagnostics_csv(levels: &[LevelDiagnostics]) -> String {
    let mut s = String::from("level,x_l,mean_delta_phi,weight_mean,weight_se\n");
    for d in levels {
        s.push_str(&format!("{},{},{},{},{}\n", d.level, d.exponent, d.mean_delta_phi, d.weight_mean, d.weight_se));
    }
    s
}

/// Martingale check of the Girsanov weight on a tree-embedded functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub weight: EstimateWithError,
    pub z: f64,
    pub max_abs_log_weight: f64,
    pub sup_psi: f64,
    pub bound_violations: u64,
}

/// Samples noise paths, embeds them into the tree, evaluates the exact
/// `phi_0..phi_{K+1}` along each path and averages the weights.
pub fn martingale_check<F>(
    psi: &F,
    tree: &HierarchicalMeasure,
    x: &crate::rsb_tree::RsbExponents,
    n: usize,
    paths: usize,
    seed: SeedStream,
) -> Result<MartingaleReport>
where
    F: Fn(&[f64]) -> f64,
{
    let mut exact = crate::rsb_tree::ExactPhi::new(psi, tree, x, n)?;
    let emb = WienerEmbedding::new(tree.clone());
    let depth = tree.depth();
    let leaves = tree.leaf_values();
    let sup_psi = sup_over_leaf_tuples(psi, &leaves, n);
    let mut stats = RunningStats::new();
    let mut max_abs: f64 = 0.0;
    let mut violations = 0;
    let mut rng = seed.rng();
    for _ in 0..paths {
        let noise = LevelNoise::sample(n, depth + 1, &mut rng);
        let tuple: Vec<TreePath> = (0..n).map(|c| embed_tree(&emb, &u_process(&noise, c))).collect::<Result<_>>()?;
        let mut phi = exact.along(&tuple);
        phi.push(*phi.last().unwrap());
        let w = girsanov_weight(&phi, x.values())?;
        stats.push(w.weight);
        max_abs = max_abs.max(w.log_weight.abs());
        if w.log_weight.abs() > 2.0 * sup_psi + 1e-12 {
            violations += 1;
        }
    }
    let weight = stats.estimate();
    Ok(MartingaleReport {
        weight,
        z: weight.z_against(1.0),
        max_abs_log_weight: max_abs,
        sup_psi,
        bound_violations: violations,
    })
}

fn sup_over_leaf_tuples<F: Fn(&[f64]) -> f64>(psi: &F, leaves: &[f64], n: usize) -> f64 {
    let b = leaves.len();
    let mut idx = vec![0usize; n];
    let mut m = vec![0.0; n];
    let mut sup: f64 = 0.0;
    loop {
        for i in 0..n {
            m[i] = leaves[idx[i]];
        }
        sup = sup.max(psi(&m).abs());
        let mut i = 0;
        loop {
            if i == n {
                return sup;
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

/// Gauss-Hermite rule for the standard normal: `E[f(Z)] ~ sum w_i f(x_i)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on physicists' Hermite polynomials, then rescaled.
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let s2 = std::f64::consts::SQRT_2;
    let sp = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|v| v * s2).collect();
    let weights = w.iter().map(|v| v / sp).collect();
    (nodes, weights)
}

/// Lattice solver for one-copy functionals `Psi = g(omega(1))`.
///
/// Between grid times `phi(q_l, .)` depends on `omega(q_l)` only, so the
/// recursion runs on a spatial lattice with Gauss-Hermite averages and
/// cubic interpolation. This handles measures with hundreds of levels,
/// where nested sampling is out of reach.
#[derive(Debug, Clone)]
pub struct TerminalLattice {
    half_width: f64,
    spacing: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Default for TerminalLattice {
    fn default() -> Self {
        let (nodes, weights) = gauss_hermite(40);
        Self { half_width: 12.0, spacing: 0.01, nodes, weights }
    }
}

impl TerminalLattice {
    fn points(&self) -> usize {
        (2.0 * self.half_width / self.spacing).round() as usize + 1
    }

    fn y(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing
    }

    fn interpolate(&self, v: &[f64], y: f64) -> f64 {
        let n = v.len();
        let t = (y + self.half_width) / self.spacing;
        if t <= 0.0 {
            return v[0] + (v[1] - v[0]) * t;
        }
        if t >= (n - 1) as f64 {
            return v[n - 1] + (v[n - 1] - v[n - 2]) * (t - (n - 1) as f64);
        }
        let i = (t.floor() as usize).clamp(1, n - 3);
        let s = t - i as f64;
        let (p0, p1, p2, p3) = (v[i - 1], v[i], v[i + 1], v[i + 2]);
        // cubic Lagrange through i-1..i+2
        let l0 = -s * (s - 1.0) * (s - 2.0) / 6.0;
        let l1 = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0;
        let l2 = -(s + 1.0) * s * (s - 2.0) / 2.0;
        let l3 = (s + 1.0) * s * (s - 1.0) / 6.0;
        l0 * p0 + l1 * p1 + l2 * p2 + l3 * p3
    }

    /// `phi(q_0, y)` on the lattice.
    pub fn solve<G: Fn(f64) -> f64>(&self, g: &G, mu: &DiscreteParisiMeasure) -> Vec<f64> {
        let n = self.points();
        let mut v: Vec<f64> = (0..n).map(|i| g(self.y(i))).collect();
        let q = mu.q();
        let x = mu.x();
        let mut next = vec![0.0; n];
        let mut buf = vec![0.0; self.nodes.len()];
        for l in (1..q.len()).rev() {
            let dq = q[l] - q[l - 1];
            if dq <= 0.0 {
                continue;
            }
            let sd = dq.sqrt();
            let e = x[l];
            for (i, slot) in next.iter_mut().enumerate() {
                let y = self.y(i);
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = self.interpolate(&v, y + sd * self.nodes[k]);
                }
                *slot = if e == 0.0 {
                    buf.iter().zip(&self.weights).map(|(f, w)| w * f).sum()
                } else {
                    let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = buf.iter().zip(&self.weights).map(|(f, w)| w * (e * (f - m)).exp()).sum();
                    m + s.ln() / e
                };
            }
            std::mem::swap(&mut v, &mut next);
        }
        v
    }

    /// `E[phi_0(omega(0))]` by Gauss-Hermite quadrature.
    pub fn expectation<G: Fn(f64) -> f64>(&self, g: &G, mu: &DiscreteParisiMeasure) -> f64 {
        let v = self.solve(g, mu);
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * self.interpolate(&v, z)).sum()
    }

    /// `E[phi_0(omega(0))]` with `omega(0)` sampled: stream `seed` gives the
    /// same draws for every measure, so differences across measures are paired.
    pub fn expectation_mc<G: Fn(f64) -> f64>(
        &self,
        g: &G,
        mu: &DiscreteParisiMeasure,
        outer: usize,
        seed: SeedStream,
    ) -> (EstimateWithError, Vec<f64>) {
        let v = self.solve(g, mu);
        let mut rng = seed.rng();
        let samples: Vec<f64> = (0..outer)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.interpolate(&v, z)
            })
            .collect();
        (EstimateWithError::from_samples(&samples), samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn cdf_and_uniforms() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        let noise = LevelNoise::from_values(vec![vec![0.0, 1.0, -1.0]]).unwrap();
        let u = u_process(&noise, 0);
        assert_eq!(u[0], 0.5);
        assert!((u[1] + u[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(40);
        let m = |k: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(k)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(6) - 15.0).abs() < 1e-9);
    }

    #[test]
    fn embedding_examples() {
        let t = HierarchicalMeasure::from_json(r#"{"w":[0.5,0.5],"children":[{"m":1},{"m":-1}]}"#).unwrap();
        let e = WienerEmbedding::new(t);
        let p = embed_tree(&e, &[0.3, 0.9]).unwrap();
        assert_eq!(p.leaf_value(e.tree()), 1.0);
        assert!(embed_tree(&e, &[0.3]).is_err());
        let chain = WienerEmbedding::new(HierarchicalMeasure::single_leaf(2, 0.4).unwrap());
        for u in [0.01, 0.5, 0.99] {
            assert_eq!(embed_tree(&chain, &[u, u, u]).unwrap().leaf_value(chain.tree()), 0.4);
        }
    }

    #[test]
    fn girsanov_examples() {
        let w = girsanov_weight(&[0.7, 0.7, 0.7], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(w.weight, 1.0);
        let w = girsanov_weight(&[0.2, 1.0], &[0.0, 1.0]).unwrap();
        assert!((w.log_weight - 0.8).abs() < 1e-15);
        assert!(girsanov_weight(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn lattice_gaussian_closed_form() {
        // g(y) = a y: Phi = (a^2/2) int_0^1 mu([0,t]) dt
        let mu = DiscreteParisiMeasure::new(vec![(0.0, 0.0), (0.3, 0.2), (0.8, 0.7), (1.0, 1.0)]).unwrap();
        let a = 0.9;
        let lat = TerminalLattice::default();
        let v = lat.expectation(&|y| a * y, &mu);
        let integral = 0.3 * 0.2 + 0.5 * 0.7 + 0.2 * 1.0;
        assert!((v - a * a / 2.0 * integral).abs() < 1e-8, "{v}");
    }

    #[test]
    fn tanh_features_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = TanhFeatures::random(2, 3, 4, 1.0, &mut rng);
        let bound = f.sup_bound().unwrap();
        for _ in 0..1000 {
            let noise = LevelNoise::sample(2, 3, &mut rng);
            assert!(f.eval(&noise).abs() <= bound);
        }
    }
}
