//! Parisi parameters: probability measures on `[0, 1]` seen through their CDF.
//!
//! A [`DiscreteParisiMeasure`] is the staircase `mu([0,q]) = x_l` for
//! `q in [q_{l-1}, q_l)`, with value 1 at `q = 1`. General measures are
//! arbitrary monotone CDF handles and are brought to staircase form by
//! [`discretize`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RsbError};

const PROBE_POINTS: usize = 10_000;

/// Anything with a CDF on `[0, 1]`.
pub trait ParisiCdf {
    /// `mu([0, q])`, right-continuous, equal to 1 at `q = 1`.
    fn cdf(&self, q: f64) -> f64;

    /// Breakpoints if the CDF is a staircase.
    fn staircase(&self) -> Option<&DiscreteParisiMeasure> {
        None
    }
}

/// Staircase measure given by levels `(q_l, x_l)`, `l = 0..=K+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureJson", into = "MeasureJson")]
pub struct DiscreteParisiMeasure {
    q: Vec<f64>,
    x: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    levels: Vec<[f64; 2]>,
}

impl TryFrom<MeasureJson> for DiscreteParisiMeasure {
    type Error = RsbError;
    fn try_from(j: MeasureJson) -> Result<Self> {
        Self::new(j.levels.iter().map(|l| (l[0], l[1])).collect())
    }
}

impl From<DiscreteParisiMeasure> for MeasureJson {
    fn from(m: DiscreteParisiMeasure) -> Self {
        MeasureJson { levels: m.q.iter().zip(&m.x).map(|(&q, &x)| [q, x]).collect() }
    }
}

impl DiscreteParisiMeasure {
    /// Validates `q_0 = x_0 = 0`, `q_{K+1} = x_{K+1} = 1` and monotonicity of
    /// both sequences. `x_1 = 0` is accepted: such a plateau carries no
    /// tilting and is averaged linearly by the evaluators.
    pub fn new(levels: Vec<(f64, f64)>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(RsbError::InvalidParameter("a measure needs at least two levels".into()));
        }
        let (q, x): (Vec<f64>, Vec<f64>) = levels.into_iter().unzip();
        let bad = |msg: &str| Err(RsbError::InvalidParameter(msg.to_string()));
        if q.iter().chain(&x).any(|v| !(0.0..=1.0).contains(v)) {
            return bad("q and x must lie in [0, 1]");
        }
        if q[0] != 0.0 || x[0] != 0.0 {
            return bad("first level must be (0, 0)");
        }
        if *q.last().unwrap() != 1.0 || *x.last().unwrap() != 1.0 {
            return bad("last level must be (1, 1)");
        }
        if q.windows(2).any(|w| w[1] < w[0]) {
            return bad("q must be non-decreasing");
        }
        if x.windows(2).any(|w| w[1] < w[0]) {
            return bad("x must be non-decreasing");
        }
        Ok(Self { q, x })
    }

    /// Measure with plateaus `x_1..x_{K+1}` on the grid `q_0..q_{K+1}`.
    /// `x` is given without the leading zero and must end with 1.
    pub fn from_grid(q: &[f64], x: &[f64]) -> Result<Self> {
        if q.len() != x.len() + 1 {
            return Err(RsbError::GridMismatch(format!("{} grid points for {} plateaus", q.len(), x.len())));
        }
        let mut levels = vec![(q[0], 0.0)];
        levels.extend(q[1..].iter().copied().zip(x.iter().copied()));
        Self::new(levels)
    }

    /// All mass at 0: `mu([0,q]) = 1` everywhere.
    pub fn step_at_zero() -> Self {
        Self { q: vec![0.0, 1.0], x: vec![0.0, 1.0] }
    }

    /// All mass at 1: `mu([0,q]) = 0` for `q < 1`.
    pub fn point_mass_at_one() -> Self {
        Self { q: vec![0.0, 1.0, 1.0], x: vec![0.0, 0.0, 1.0] }
    }

    pub fn levels(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.q.iter().copied().zip(self.x.iter().copied())
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// `K`: the number of interior levels.
    pub fn k(&self) -> usize {
        self.q.len() - 2
    }

    pub fn cdf_at(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(RsbError::Domain(format!("q = {q} outside [0, 1]")));
        }
        Ok(self.eval(q))
    }

    fn eval(&self, q: f64) -> f64 {
        if q >= 1.0 {
            return 1.0;
        }
        // first l >= 1 with q < q_l
        let l = self.q.partition_point(|&ql| ql <= q);
        self.x[l.min(self.x.len() - 1)]
    }

    /// `mu([0, q))`.
    fn left_limit(&self, q: f64) -> f64 {
        if q <= 0.0 {
            return 0.0;
        }
        let l = self.q.partition_point(|&ql| ql < q);
        self.x[l.min(self.x.len() - 1)]
    }

    /// Removes zero-length plateaus and merges neighbours with equal `x`.
    /// The CDF is unchanged.
    pub fn normalize(&self) -> Self {
        let mut q = vec![0.0];
        let mut x = vec![0.0];
        for l in 1..self.q.len() {
            if self.q[l] <= self.q[l - 1] {
                continue;
            }
            if x.len() > 1 && *x.last().unwrap() == self.x[l] {
                *q.last_mut().unwrap() = self.q[l];
            } else {
                q.push(self.q[l]);
                x.push(self.x[l]);
            }
        }
        if *x.last().unwrap() != 1.0 {
            q.push(1.0);
            x.push(1.0);
        }
        Self { q, x }
    }

    /// Common refinement of two staircases: both measures expressed on the
    /// union of their breakpoints.
    pub fn refine_pair(a: &Self, b: &Self) -> (Self, Self) {
        let mut grid: Vec<f64> = a.q.iter().chain(&b.q).copied().filter(|&q| q > 0.0 && q < 1.0).collect();
        grid.sort_by(|u, v| u.partial_cmp(v).unwrap());
        grid.dedup();
        let build = |m: &Self| {
            let mut levels = vec![(0.0, 0.0)];
            for &g in &grid {
                levels.push((g, m.left_limit(g)));
            }
            levels.push((1.0, m.left_limit(1.0)));
            levels.push((1.0, 1.0));
            Self { q: levels.iter().map(|l| l.0).collect(), x: levels.iter().map(|l| l.1).collect() }
        };
        (build(a), build(b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measure serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl ParisiCdf for DiscreteParisiMeasure {
    fn cdf(&self, q: f64) -> f64 {
        self.eval(q.clamp(0.0, 1.0))
    }

    fn staircase(&self) -> Option<&DiscreteParisiMeasure> {
        Some(self)
    }
}

/// A measure known only through its CDF.
#[derive(Clone)]
pub struct GeneralParisiMeasure {
    cdf: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    staircase: Option<DiscreteParisiMeasure>,
}

impl fmt::Debug for GeneralParisiMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralParisiMeasure").field("staircase", &self.staircase).finish_non_exhaustive()
    }
}

impl GeneralParisiMeasure {
    /// Wraps a CDF handle after probing it for monotonicity on a
    /// `10^4`-point grid and checking `cdf(1) = 1`.
    pub fn new<F>(cdf: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let mut prev = 0.0;
        for i in 0..=PROBE_POINTS {
            let q = i as f64 / PROBE_POINTS as f64;
            let v = cdf(q);
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(RsbError::NonMonotone(format!("cdf({q}) = {v} outside [0, 1]")));
            }
            if v < prev - 1e-12 {
                return Err(RsbError::NonMonotone(format!("cdf decreases near q = {q}")));
            }
            prev = v;
        }
        if (cdf(1.0) - 1.0).abs() > 1e-12 {
            return Err(RsbError::NonMonotone(format!("cdf(1) = {} != 1", cdf(1.0))));
        }
        Ok(Self { cdf: Arc::new(cdf), staircase: None })
    }

    pub fn from_discrete(mu: DiscreteParisiMeasure) -> Self {
        let m = mu.clone();
        Self { cdf: Arc::new(move |q| m.cdf(q)), staircase: Some(mu) }
    }
}

impl ParisiCdf for GeneralParisiMeasure {
    fn cdf(&self, q: f64) -> f64 {
        if q >= 1.0 {
            1.0
        } else {
            (self.cdf)(q.max(0.0)).clamp(0.0, 1.0)
        }
    }

    fn staircase(&self) -> Option<&DiscreteParisiMeasure> {
        self.staircase.as_ref()
    }
}

pub fn cdf_at(mu: &DiscreteParisiMeasure, q: f64) -> Result<f64> {
    mu.cdf_at(q)
}

/// `sup_q |mu1([0,q]) - mu2([0,q])|`.
///
/// Exact over the union of breakpoints when both are staircases. Otherwise
/// the staircase plateaus (if any) are checked at their ends and the
/// general CDF is scanned on a `10^4`-point grid.
pub fn sup_distance(mu1: &dyn ParisiCdf, mu2: &dyn ParisiCdf) -> f64 {
    let mut points: Vec<f64> = Vec::new();
    for m in [mu1, mu2] {
        if let Some(s) = m.staircase() {
            for &q in s.q() {
                points.push(q);
                // left end of the next plateau is the breakpoint itself; the
                // right end is approached from below
                points.push((q - 1e-13).max(0.0));
            }
        }
    }
    if mu1.staircase().is_none() || mu2.staircase().is_none() {
        points.extend((0..=PROBE_POINTS).map(|i| i as f64 / PROBE_POINTS as f64));
    }
    points.into_iter().filter(|q| (0.0..=1.0).contains(q)).map(|q| (mu1.cdf(q) - mu2.cdf(q)).abs()).fold(0.0, f64::max)
}

/// Value-space slicing: breakpoints at the generalized inverse of the CDF at
/// multiples of `h = 1/ceil(1/tol)`, plateau values at slice midpoints, so
/// the sup distance is at most `h/2 <= tol` by construction.
pub fn discretize(mu: &GeneralParisiMeasure, tol: f64) -> Result<DiscreteParisiMeasure> {
    if !(tol > 0.0) {
        return Err(RsbError::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    if let Some(s) = mu.staircase() {
        return Ok(s.clone());
    }
    let m = (1.0 / tol).ceil() as usize;
    let h = 1.0 / m as f64;
    let mut levels = vec![(0.0, 0.0)];
    let mut prev_q = 0.0;
    for k in 1..m {
        let target = k as f64 * h;
        let qk = inverse_cdf(mu, target, prev_q);
        levels.push((qk, (k as f64 - 0.5) * h));
        prev_q = qk;
    }
    levels.push((1.0, (m as f64 - 0.5) * h));
    levels.push((1.0, 1.0));
    Ok(DiscreteParisiMeasure::new(levels)?.normalize())
}

/// Smallest `q >= lo` with `cdf(q) >= target`, by bisection.
fn inverse_cdf(mu: &dyn ParisiCdf, target: f64, lo: f64) -> f64 {
    if mu.cdf(lo) >= target {
        return lo;
    }
    let (mut a, mut b) = (lo, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if mu.cdf(mid) >= target {
            b = mid;
        } else {
            a = mid;
        }
    }
    b
}

/// `q_x = sup{q : mu([0,q)) < x}` with `sup(empty) = 0`.
pub fn support_infimum(mu: &DiscreteParisiMeasure, x: f64) -> f64 {
    let q = mu.q();
    let xs = mu.x();
    let mut best = 0.0;
    for l in 1..q.len() {
        // mu([0,q)) = x_l on (q_{l-1}, q_l]
        if q[l] > q[l - 1] && xs[l] < x {
            best = q[l];
        }
    }
    best
}
