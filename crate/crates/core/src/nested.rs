//! Nested Monte Carlo for level-wise log-moment recursions
//!
//! ```text
//! phi_L     = terminal(noise)
//! phi_{l-1} = (1/e_l) log E[exp(e_l phi_l) | levels < l]      (e_l > 0)
//! phi_{l-1} = E[phi_l | levels < l]                           (e_l = 0)
//! result    = E[phi_0]
//! ```
//!
//! Each conditional expectation is replaced by an empirical mean over fresh
//! draws of the next level. Several channels (different terminals or
//! exponent vectors) share every draw, which gives common random numbers
//! for differences and finite differences.
//!
//! The plain estimator is biased by `O(1/N)` per level (Jensen). With
//! `bias_correction` on, every node also carries a second-order corrected
//! value: children are de-biased by their own estimated variance before
//! the log-mean-exp, and the delta-method term `rho/2` is added back, where
//! `rho` is the relative variance of the inner mean.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsbError};
use crate::stats::{EstimateWithError, RunningStats, SeedStream};

/// Terminal values above this magnitude abort the run as unbounded.
pub const MAGNITUDE_GUARD: f64 = 1e3;

const BLOCK: usize = 64;

/// Sample counts of a nested run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPlan {
    pub outer: usize,
    /// Inner counts per level; the last entry repeats for deeper levels.
    pub inner: Vec<usize>,
    #[serde(default = "default_true")]
    pub bias_correction: bool,
}

fn default_true() -> bool {
    true
}

impl Default for McPlan {
    fn default() -> Self {
        Self { outer: 4096, inner: vec![256], bias_correction: true }
    }
}

impl McPlan {
    pub fn new(outer: usize, inner: usize) -> Self {
        Self { outer, inner: vec![inner], bias_correction: true }
    }

    pub fn with_inner(mut self, inner: Vec<usize>) -> Self {
        self.inner = inner;
        self
    }

    pub fn uncorrected(mut self) -> Self {
        self.bias_correction = false;
        self
    }

    /// Inner count at inner level `level >= 1`.
    pub fn inner_at(&self, level: usize) -> usize {
        let i = (level - 1).min(self.inner.len().saturating_sub(1));
        self.inner.get(i).copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer < 2 {
            return Err(RsbError::InvalidParameter("need at least 2 outer samples".into()));
        }
        if self.inner.is_empty() || self.inner.contains(&0) {
            return Err(RsbError::InvalidParameter("inner sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Source of randomness and terminal values for a nested run.
pub trait NestedModel: Sync {
    type State: Clone + Send;

    /// Number of inner levels `L`; level 0 is the outer draw.
    fn n_levels(&self) -> usize;

    fn new_state(&self) -> Self::State;

    /// Redraws the randomness of `level` (for every copy).
    fn draw(&self, state: &mut Self::State, level: usize, rng: &mut ChaCha8Rng);

    /// Whether terminals depend on the draw at inner level `level`.
    /// Inactive levels are drawn once and passed through.
    fn level_active(&self, _level: usize) -> bool {
        true
    }

    /// Writes one value per channel, and the value of the Psi-direction per
    /// channel when directions are tracked.
    fn terminal(&self, state: &Self::State, values: &mut [f64], directions: &mut [f64]);
}

/// Exponent vectors of the channels.
#[derive(Debug, Clone)]
pub struct Channels {
    /// `exponents[c][l-1]` is `e_l` of channel `c`.
    pub exponents: Vec<Vec<f64>>,
    /// Optional exponent directions `delta e_l`, same layout.
    pub exponent_directions: Option<Vec<Vec<f64>>>,
    /// Whether the terminal writes Psi-directions.
    pub track_psi_direction: bool,
}

impl Channels {
    pub fn same_exponents(n_channels: usize, e: &[f64]) -> Self {
        Self { exponents: vec![e.to_vec(); n_channels], exponent_directions: None, track_psi_direction: false }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }
}

/// Per-level diagnostics of channel 0 along the first child of every node.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub exponent: f64,
    pub mean_delta_phi: f64,
    pub weight_mean: f64,
    pub weight_se: f64,
}

#[derive(Debug, Clone)]
pub struct NestedOutput {
    n_channels: usize,
    outer: usize,
    /// `[outer * C + c]`, corrected when the plan asks for it.
    values: Vec<f64>,
    plain: Vec<f64>,
    d_psi: Vec<f64>,
    d_mu: Vec<f64>,
    pub levels: Vec<LevelDiagnostics>,
}

impl NestedOutput {
    pub fn n_outer(&self) -> usize {
        self.outer
    }

    fn combo(&self, data: &[f64], coefs: &[(usize, f64)]) -> EstimateWithError {
        let mut s = RunningStats::new();
        for i in 0..self.outer {
            let row = &data[i * self.n_channels..(i + 1) * self.n_channels];
            s.push(coefs.iter().map(|&(c, a)| a * row[c]).sum());
        }
        s.estimate()
    }

    pub fn estimate(&self, channel: usize) -> EstimateWithError {
        self.combo(&self.values, &[(channel, 1.0)])
    }

    pub fn plain_estimate(&self, channel: usize) -> EstimateWithError {
        self.combo(&self.plain, &[(channel, 1.0)])
    }

    /// Linear combination of channels, with the SE of the paired samples.
    pub fn contrast(&self, coefs: &[(usize, f64)]) -> EstimateWithError {
        self.combo(&self.values, coefs)
    }

    pub fn d_psi(&self, channel: usize) -> EstimateWithError {
        self.combo(&self.d_psi, &[(channel, 1.0)])
    }

    pub fn d_mu(&self, channel: usize) -> EstimateWithError {
        self.combo(&self.d_mu, &[(channel, 1.0)])
    }

    /// Per-outer-sample values of one channel.
    pub fn samples(&self, channel: usize) -> Vec<f64> {
        (0..self.outer).map(|i| self.values[i * self.n_channels + channel]).collect()
    }
}

/// Forward tangent of `(phi, bc, var)` along one direction.
#[derive(Debug, Clone, Copy, Default)]
struct Tangent {
    phi: f64,
    bc: f64,
    var: f64,
}

impl Tangent {
    fn value(&self, corrected: bool) -> f64 {
        if corrected {
            self.bc
        } else {
            self.phi
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct NodeVal {
    phi: f64,
    /// Bias-corrected value and its estimated variance.
    bc: f64,
    var: f64,
    psi: Tangent,
    mu: Tangent,
}

#[derive(Clone, Default)]
struct LevelAcc {
    delta: RunningStats,
    weight: RunningStats,
}

struct Runner<'a, M: NestedModel> {
    model: &'a M,
    ch: &'a Channels,
    plan: &'a McPlan,
}

impl<'a, M: NestedModel> Runner<'a, M> {
    fn node(
        &self,
        level: usize,
        state: &mut M::State,
        rng: &mut ChaCha8Rng,
        scratch: &mut [Vec<NodeVal>],
        term: &mut (Vec<f64>, Vec<f64>),
        out: &mut [NodeVal],
        acc: &mut [LevelAcc],
        max_abs: &mut f64,
    ) {
        let nc = self.ch.len();
        let depth = self.model.n_levels();
        if level > depth {
            let (vals, dirs) = term;
            self.model.terminal(state, vals, dirs);
            for c in 0..nc {
                let v = vals[c];
                *max_abs = max_abs.max(v.abs());
                let d = if self.ch.track_psi_direction { dirs[c] } else { 0.0 };
                out[c] = NodeVal {
                    phi: v,
                    bc: v,
                    var: 0.0,
                    psi: Tangent { phi: d, bc: d, var: 0.0 },
                    mu: Tangent::default(),
                };
            }
            return;
        }
        let n = if self.model.level_active(level) { self.plan.inner_at(level) } else { 1 };
        let (cur, rest) = scratch.split_first_mut().expect("scratch sized to depth");
        for j in 0..n {
            self.model.draw(state, level, rng);
            let (head, _) = cur.split_at_mut((j + 1) * nc);
            self.node(level + 1, state, rng, rest, term, &mut head[j * nc..], acc, max_abs);
        }
        if n == 1 {
            out[..nc].copy_from_slice(&cur[..nc]);
            let a = &mut acc[level - 1];
            a.delta.push(0.0);
            a.weight.push(1.0);
            return;
        }
        for c in 0..nc {
            let e = self.ch.exponents[c][level - 1];
            let de = self.ch.exponent_directions.as_ref().map_or(0.0, |d| d[c][level - 1]);
            let want = Want { psi: self.ch.track_psi_direction, mu: self.ch.exponent_directions.is_some() };
            out[c] = combine(cur, c, nc, n, e, de, self.plan.bias_correction, want);
        }
        let e0 = self.ch.exponents[0][level - 1];
        let delta = cur[0].phi - out[0].phi;
        let a = &mut acc[level - 1];
        a.delta.push(delta);
        a.weight.push((e0 * delta).exp());
    }
}

/// Which tangents a run carries.
#[derive(Debug, Clone, Copy)]
struct Want {
    psi: bool,
    mu: bool,
}

fn combine(children: &[NodeVal], c: usize, nc: usize, n: usize, e: f64, de: f64, bias: bool, want: Want) -> NodeVal {
    let kid = |j: usize| &children[j * nc + c];
    let nf = n as f64;
    let mean = |f: &dyn Fn(&NodeVal) -> f64| (0..n).map(|j| f(kid(j))).sum::<f64>() / nf;
    let flat = |t: f64| Tangent { phi: t, bc: t, var: 0.0 };
    if e == 0.0 {
        let phi = mean(&|k| k.phi);
        if !bias {
            let psi = if want.psi { flat(mean(&|k| k.psi.phi)) } else { Tangent::default() };
            let mu = if want.mu { flat(mean(&|k| k.mu.phi)) } else { Tangent::default() };
            return NodeVal { phi, bc: phi, var: 0.0, psi, mu };
        }
        let bc = mean(&|k| k.bc);
        let norm = (nf - 1.0) * nf;
        let var = (0..n).map(|j| (kid(j).bc - bc).powi(2)).sum::<f64>() / norm;
        let tangent = |on: bool, t: &dyn Fn(&NodeVal) -> Tangent| {
            if !on {
                return Tangent::default();
            }
            let dbc = mean(&|k| t(k).bc);
            let dvar = 2.0 * (0..n).map(|j| (kid(j).bc - bc) * (t(kid(j)).bc - dbc)).sum::<f64>() / norm;
            Tangent { phi: mean(&|k| t(k).phi), bc: dbc, var: dvar }
        };
        return NodeVal { phi, bc, var, psi: tangent(want.psi, &|k| k.psi), mu: tangent(want.mu, &|k| k.mu) };
    }
    // plain log-mean-exp with tilted tangents
    let m = (0..n).map(|j| e * kid(j).phi).fold(f64::NEG_INFINITY, f64::max);
    let w = |j: usize| (e * kid(j).phi - m).exp();
    let s: f64 = (0..n).map(w).sum();
    let phi = (m + (s / nf).ln()) / e;
    let tilt = |t: &dyn Fn(&NodeVal) -> f64, de: f64| -> f64 {
        (0..n).map(|j| w(j) / s * (t(kid(j)) + de / e * (kid(j).phi - phi))).sum()
    };
    let dphi_psi = if want.psi { tilt(&|k| k.psi.phi, 0.0) } else { 0.0 };
    let dphi_mu = if want.mu { tilt(&|k| k.mu.phi, de) } else { 0.0 };
    if !bias {
        return NodeVal { phi, bc: phi, var: 0.0, psi: flat(dphi_psi), mu: flat(dphi_mu) };
    }
    // children adjusted to e * bc - e^2 var / 2, then second-order correction
    let a = |j: usize| e * kid(j).bc - 0.5 * e * e * kid(j).var;
    let mb = (0..n).map(a).fold(f64::NEG_INFINITY, f64::max);
    let wa = |j: usize| (a(j) - mb).exp();
    let sa: f64 = (0..n).map(wa).sum();
    let r = |j: usize| nf * wa(j) / sa;
    let norm = nf * (nf - 1.0);
    let rho = (0..n).map(|j| (r(j) - 1.0).powi(2)).sum::<f64>() / norm;
    let bc = (mb + (sa / nf).ln() + 0.5 * rho) / e;
    let var = rho / (e * e);
    let tangent = |on: bool, t: &dyn Fn(&NodeVal) -> Tangent, de: f64, dphi: f64| -> Tangent {
        if !on {
            return Tangent::default();
        }
        let da = |j: usize| {
            let (k, tk) = (kid(j), t(kid(j)));
            de * k.bc + e * tk.bc - e * de * k.var - 0.5 * e * e * tk.var
        };
        let dl: f64 = (0..n).map(|j| wa(j) / sa * da(j)).sum();
        let drho = 2.0 * (0..n).map(|j| (r(j) - 1.0) * r(j) * (da(j) - dl)).sum::<f64>() / norm;
        Tangent {
            phi: dphi,
            bc: (dl + 0.5 * drho) / e - de / e * bc,
            var: drho / (e * e) - 2.0 * de * rho / (e * e * e),
        }
    };
    NodeVal {
        phi,
        bc,
        var,
        psi: tangent(want.psi, &|k| k.psi, 0.0, dphi_psi),
        mu: tangent(want.mu, &|k| k.mu, de, dphi_mu),
    }
}

/// Runs the nested estimator. Outer sample `i` uses stream `seed.substream(i)`,
/// so results do not depend on the number of threads.
pub fn run<M: NestedModel>(model: &M, channels: &Channels, plan: &McPlan, seed: SeedStream) -> Result<NestedOutput> {
    plan.validate()?;
    let depth = model.n_levels();
    let nc = channels.len();
    if nc == 0 {
        return Err(RsbError::InvalidParameter("no channels".into()));
    }
    for (c, e) in channels.exponents.iter().enumerate() {
        if e.len() != depth {
            return Err(RsbError::GridMismatch(format!("channel {c} has {} exponents for {depth} levels", e.len())));
        }
        if e.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RsbError::InvalidParameter(format!("channel {c} exponents must lie in [0, 1]")));
        }
        if let Some(d) = &channels.exponent_directions {
            if d[c].len() != depth {
                return Err(RsbError::GridMismatch("exponent direction length".into()));
            }
            if e.iter().zip(&d[c]).any(|(&x, &dx)| x == 0.0 && dx != 0.0) {
                return Err(RsbError::InvalidParameter("direction moves a level with zero exponent".into()));
            }
        }
    }
    let runner = Runner { model, ch: channels, plan };
    let n_blocks = plan.outer.div_ceil(BLOCK);

    struct BlockOut {
        values: Vec<f64>,
        plain: Vec<f64>,
        d_psi: Vec<f64>,
        d_mu: Vec<f64>,
        acc: Vec<LevelAcc>,
        max_abs: f64,
    }

    let blocks: Vec<BlockOut> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(plan.outer);
            let mut state = model.new_state();
            let mut scratch: Vec<Vec<NodeVal>> = (1..=depth)
                .map(|l| {
                    let n = if model.level_active(l) { plan.inner_at(l) } else { 1 };
                    vec![NodeVal::default(); n * nc]
                })
                .collect();
            let mut term = (vec![0.0; nc], vec![0.0; nc]);
            let mut acc = vec![LevelAcc::default(); depth];
            let mut out = vec![NodeVal::default(); nc];
            let mut bo = BlockOut {
                values: Vec::with_capacity((hi - lo) * nc),
                plain: Vec::with_capacity((hi - lo) * nc),
                d_psi: Vec::with_capacity((hi - lo) * nc),
                d_mu: Vec::with_capacity((hi - lo) * nc),
                acc: Vec::new(),
                max_abs: 0.0,
            };
            for i in lo..hi {
                let mut rng = seed.substream(i as u64).rng();
                model.draw(&mut state, 0, &mut rng);
                runner.node(1, &mut state, &mut rng, &mut scratch, &mut term, &mut out, &mut acc, &mut bo.max_abs);
                for v in &out {
                    bo.values.push(if plan.bias_correction { v.bc } else { v.phi });
                    bo.plain.push(v.phi);
                    bo.d_psi.push(v.psi.value(plan.bias_correction));
                    bo.d_mu.push(v.mu.value(plan.bias_correction));
                }
            }
            bo.acc = acc;
            bo
        })
        .collect();

    let mut output = NestedOutput {
        n_channels: nc,
        outer: plan.outer,
        values: Vec::with_capacity(plan.outer * nc),
        plain: Vec::with_capacity(plan.outer * nc),
        d_psi: Vec::with_capacity(plan.outer * nc),
        d_mu: Vec::with_capacity(plan.outer * nc),
        levels: Vec::new(),
    };
    let mut acc = vec![LevelAcc::default(); depth];
    let mut max_abs: f64 = 0.0;
    for b in blocks {
        output.values.extend(b.values);
        output.plain.extend(b.plain);
        output.d_psi.extend(b.d_psi);
        output.d_mu.extend(b.d_mu);
        for (a, x) in acc.iter_mut().zip(&b.acc) {
            a.delta.merge(&x.delta);
            a.weight.merge(&x.weight);
        }
        max_abs = max_abs.max(b.max_abs);
    }
    if !(max_abs <= MAGNITUDE_GUARD) {
        return Err(RsbError::Unbounded(max_abs));
    }
    output.levels = acc
        .iter()
        .enumerate()
        .map(|(l, a)| LevelDiagnostics {
            level: l + 1,
            exponent: channels.exponents[0][l],
            mean_delta_phi: a.delta.mean(),
            weight_mean: a.weight.mean(),
            weight_se: a.weight.std_error(),
        })
        .collect();
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// One copy, `L` levels of standard normals, terminal `a * sum z`.
    struct Linear {
        levels: usize,
        a: f64,
    }

    impl NestedModel for Linear {
        type State = Vec<f64>;
        fn n_levels(&self) -> usize {
            self.levels
        }
        fn new_state(&self) -> Vec<f64> {
            vec![0.0; self.levels + 1]
        }
        fn draw(&self, s: &mut Vec<f64>, level: usize, rng: &mut ChaCha8Rng) {
            s[level] = StandardNormal.sample(rng);
        }
        fn terminal(&self, s: &Vec<f64>, v: &mut [f64], d: &mut [f64]) {
            let t: f64 = s.iter().sum();
            for c in 0..v.len() {
                v[c] = self.a * t;
                d[c] = t;
            }
        }
    }

    #[test]
    fn gaussian_recursion_is_unbiased_after_correction() {
        // phi_0 = a z_0 + a^2 (e_1 + e_2) / 2 exactly
        let m = Linear { levels: 2, a: 0.8 };
        let ch = Channels::same_exponents(1, &[0.5, 1.0]);
        let plan = McPlan::new(4000, 32);
        let out = run(&m, &ch, &plan, SeedStream::new(3)).unwrap();
        let exact = 0.64 * 1.5 / 2.0;
        let est = out.estimate(0);
        assert!(est.z_against(exact).abs() < 4.0, "{est:?} vs {exact}");
        let plain = out.plain_estimate(0);
        assert!(plain.value < est.value);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let m = Linear { levels: 1, a: 0.5 };
        let ch = Channels::same_exponents(1, &[0.7]);
        let plan = McPlan::new(300, 8);
        let a = run(&m, &ch, &plan, SeedStream::new(1)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run(&m, &ch, &plan, SeedStream::new(1)).unwrap());
        assert_eq!(a.samples(0), b.samples(0));
    }

    #[test]
    fn guard_trips_on_huge_terminals() {
        let m = Linear { levels: 1, a: 1e6 };
        let ch = Channels::same_exponents(1, &[1.0]);
        assert!(matches!(run(&m, &ch, &McPlan::new(10, 4), SeedStream::new(0)), Err(RsbError::Unbounded(_))));
    }

    #[test]
    fn rejects_direction_on_linear_level() {
        let m = Linear { levels: 1, a: 1.0 };
        let ch = Channels {
            exponents: vec![vec![0.0]],
            exponent_directions: Some(vec![vec![0.1]]),
            track_psi_direction: false,
        };
        assert!(run(&m, &ch, &McPlan::new(10, 4), SeedStream::new(0)).is_err());
    }
}
