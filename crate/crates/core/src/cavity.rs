//! Edge and vertex cavity functions of the 2-spin model on a `c`-regular graph.
//!
//! Both functions are sums over the `2c` cavity spins weighted by
//! `prod_i (1 + m_i sigma_i)`. They factorize over the `c` edges, which is
//! what the closed forms below evaluate; [`psi_bruteforce`] enumerates the
//! defining sums literally and serves as the reference.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsbError};
use crate::stats::SeedStream;

const LOG_FLOOR: f64 = 1e-300;
static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times a logarithm argument was clamped at `1e-300` since start-up.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn clamped_ln(v: f64) -> f64 {
    if v < LOG_FLOOR {
        if CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed) == 0 {
            log::warn!("cavity: log argument {v:e} clamped at {LOG_FLOOR:e}");
        }
        LOG_FLOOR.ln()
    } else {
        v.ln()
    }
}

/// Inverse temperature and degree of the random regular graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub connectivity: usize,
    /// Use `J_{i+c}` on the second spin of the vertex function instead of `J_i`.
    #[serde(default)]
    pub vertex_uses_2c_couplings: bool,
}

impl ModelParams {
    /// `beta` must be finite and non-negative; `beta = 0` is the trivial
    /// infinite-temperature point and is accepted.
    pub fn new(beta: f64, connectivity: usize) -> Result<Self> {
        let p = Self { beta, connectivity, vertex_uses_2c_couplings: false };
        p.validate()?;
        Ok(p)
    }

    pub fn with_2c_couplings(mut self, on: bool) -> Self {
        self.vertex_uses_2c_couplings = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(RsbError::InvalidParameter(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.connectivity == 0 {
            return Err(RsbError::InvalidParameter("connectivity must be >= 1".into()));
        }
        Ok(())
    }

    /// Cavity-field dimension `n = 2c`.
    pub fn n_fields(&self) -> usize {
        2 * self.connectivity
    }

    /// Number of couplings drawn per sample.
    pub fn coupling_len(&self) -> usize {
        if self.vertex_uses_2c_couplings {
            2 * self.connectivity
        } else {
            self.connectivity
        }
    }
}

/// Rademacher couplings, every entry exactly `±1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CouplingSample(Vec<i8>);

impl CouplingSample {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.iter().any(|&v| v != 1 && v != -1) {
            return Err(RsbError::InvalidParameter("couplings must be +1 or -1".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cavity magnetizations `m_1..m_{2c}` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationVector(Vec<f64>);

impl MagnetizationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(RsbError::Domain(format!("magnetization {v} outside [-1, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiKind {
    Edge,
    Vertex,
}

/// Precomputed per-coupling constants so the cavity functions can be
/// evaluated in the inner loops of the samplers without re-validation.
#[derive(Debug, Clone)]
pub struct CavityKernel {
    c: usize,
    edge_const: f64,
    edge_tanh: Vec<f64>,
    vertex_const: f64,
    leg1_tanh: Vec<f64>,
    leg2_tanh: Vec<f64>,
}

impl CavityKernel {
    pub fn new(params: &ModelParams, j: &CouplingSample) -> Result<Self> {
        params.validate()?;
        if j.len() != params.coupling_len() {
            return Err(RsbError::InvalidParameter(format!(
                "expected {} couplings, got {}",
                params.coupling_len(),
                j.len()
            )));
        }
        let c = params.connectivity;
        let bj: Vec<f64> = j.values().iter().map(|&v| params.beta * v as f64).collect();
        let log2cosh = |b: f64| std::f64::consts::LN_2 + ln_cosh(b);
        let edge_tanh: Vec<f64> = bj[..c].iter().map(|b| b.tanh()).collect();
        let edge_const = bj[..c].iter().map(|&b| std::f64::consts::LN_2 + log2cosh(b)).sum();
        let leg2 = if params.vertex_uses_2c_couplings { &bj[c..] } else { &bj[..c] };
        let vertex_const =
            bj[..c].iter().map(|&b| log2cosh(b)).sum::<f64>() + leg2.iter().map(|&b| log2cosh(b)).sum::<f64>();
        Ok(Self {
            c,
            edge_const,
            edge_tanh,
            vertex_const,
            leg1_tanh: bj[..c].iter().map(|b| b.tanh()).collect(),
            leg2_tanh: leg2.iter().map(|b| b.tanh()).collect(),
        })
    }

    pub fn n_fields(&self) -> usize {
        2 * self.c
    }

    /// `sum_i log[4 cosh(beta J_i) (1 + m_i m_{i+c} tanh(beta J_i))]`.
    pub fn edge(&self, m: &[f64]) -> f64 {
        debug_assert_eq!(m.len(), 2 * self.c);
        let c = self.c;
        let mut s = self.edge_const;
        for i in 0..c {
            s += clamped_ln(1.0 + m[i] * m[i + c] * self.edge_tanh[i]);
        }
        s
    }

    /// Log of the sum over `tau in {±1}^2` of the product of per-edge factors
    /// `[2cosh(bJ tau1) + 2 m_i sinh(bJ tau1)] [2cosh(bJ tau2) + 2 m_{i+c} sinh(bJ tau2)]`.
    /// The `tau` sum splits into one factor per leg.
    pub fn vertex(&self, m: &[f64]) -> f64 {
        debug_assert_eq!(m.len(), 2 * self.c);
        let c = self.c;
        let (mut a_plus, mut a_minus, mut b_plus, mut b_minus) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..c {
            let t1 = m[i] * self.leg1_tanh[i];
            let t2 = m[i + c] * self.leg2_tanh[i];
            a_plus += clamped_ln(1.0 + t1);
            a_minus += clamped_ln(1.0 - t1);
            b_plus += clamped_ln(1.0 + t2);
            b_minus += clamped_ln(1.0 - t2);
        }
        self.vertex_const + lse2(a_plus, a_minus) + lse2(b_plus, b_minus)
    }

    pub fn eval(&self, kind: PsiKind, m: &[f64]) -> f64 {
        match kind {
            PsiKind::Edge => self.edge(m),
            PsiKind::Vertex => self.vertex(m),
        }
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    hi + (-(a - b).abs()).exp().ln_1p()
}

/// `log cosh(x)` without overflow.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn check_m(params: &ModelParams, m: &MagnetizationVector) -> Result<()> {
    if m.values().len() != params.n_fields() {
        return Err(RsbError::InvalidParameter(format!(
            "expected {} magnetizations, got {}",
            params.n_fields(),
            m.values().len()
        )));
    }
    Ok(())
}

pub fn psi_edge(params: &ModelParams, j: &CouplingSample, m: &MagnetizationVector) -> Result<f64> {
    check_m(params, m)?;
    Ok(CavityKernel::new(params, j)?.edge(m.values()))
}

pub fn psi_vertex(params: &ModelParams, j: &CouplingSample, m: &MagnetizationVector) -> Result<f64> {
    check_m(params, m)?;
    Ok(CavityKernel::new(params, j)?.vertex(m.values()))
}

/// Literal enumeration of the defining sums over `sigma in {±1}^{2c}`
/// (and `tau in {±1}^2` for the vertex function).
pub fn psi_bruteforce(kind: PsiKind, params: &ModelParams, j: &CouplingSample, m: &MagnetizationVector) -> Result<f64> {
    params.validate()?;
    check_m(params, m)?;
    let n = params.n_fields();
    if n > 24 {
        return Err(RsbError::SizeGuard(format!("brute force needs 2c <= 24, got {n}")));
    }
    if j.len() != params.coupling_len() {
        return Err(RsbError::InvalidParameter("coupling length mismatch".into()));
    }
    let c = params.connectivity;
    let beta = params.beta;
    let jv: Vec<f64> = j.values().iter().map(|&v| v as f64).collect();
    let j2: Vec<f64> = if params.vertex_uses_2c_couplings { jv[c..].to_vec() } else { jv[..c].to_vec() };
    let mv = m.values();
    let mut total = 0.0;
    let mut sigma = vec![0.0; n];
    for mask in 0u32..(1u32 << n) {
        for (i, s) in sigma.iter_mut().enumerate() {
            *s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        let mut field = 1.0;
        for i in 0..n {
            field *= 1.0 + mv[i] * sigma[i];
        }
        if field == 0.0 {
            continue;
        }
        let boltz = match kind {
            PsiKind::Edge => {
                let e: f64 = (0..c).map(|i| jv[i] * sigma[i] * sigma[i + c]).sum();
                (beta * e).exp()
            }
            PsiKind::Vertex => {
                let mut s = 0.0;
                for tau1 in [-1.0, 1.0] {
                    for tau2 in [-1.0, 1.0] {
                        let e: f64 = (0..c).map(|i| jv[i] * tau1 * sigma[i] + j2[i] * tau2 * sigma[i + c]).sum();
                        s += (beta * e).exp();
                    }
                }
                s
            }
        };
        total += boltz * field;
    }
    Ok(total.ln())
}

/// One coupling sample with i.i.d. uniform `±1` entries.
pub fn sample_couplings<R: Rng + ?Sized>(params: &ModelParams, rng: &mut R) -> CouplingSample {
    CouplingSample((0..params.coupling_len()).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
}

/// All `2^len` coupling configurations, in binary order.
pub fn all_couplings(params: &ModelParams) -> Result<Vec<CouplingSample>> {
    let len = params.coupling_len();
    if len > 20 {
        return Err(RsbError::SizeGuard(format!("cannot enumerate 2^{len} coupling configurations")));
    }
    Ok((0u32..(1u32 << len))
        .map(|mask| CouplingSample((0..len).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect()))
        .collect())
}

/// How the average over couplings is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingPlan {
    /// Enumerate every configuration with equal weight.
    Exact,
    /// Average over this many i.i.d. draws.
    Sampled(usize),
}

impl CouplingPlan {
    /// `0` means exact enumeration.
    pub fn from_count(j_samples: usize) -> Self {
        if j_samples == 0 {
            CouplingPlan::Exact
        } else {
            CouplingPlan::Sampled(j_samples)
        }
    }
}

/// The coupling configurations the plan averages over.
pub fn coupling_draws(params: &ModelParams, plan: CouplingPlan, seed: SeedStream) -> Result<Vec<CouplingSample>> {
    match plan {
        CouplingPlan::Exact => all_couplings(params),
        CouplingPlan::Sampled(0) => Err(RsbError::InvalidParameter("need at least one coupling draw".into())),
        CouplingPlan::Sampled(k) => {
            let mut rng = seed.rng();
            Ok((0..k).map(|_| sample_couplings(params, &mut rng)).collect())
        }
    }
}

/// Replica-symmetric objective `E_J[psi_v(m,..,m) - psi_e(m,..,m)]`.
pub fn rs_objective(params: &ModelParams, couplings: &[CouplingSample], m: f64) -> Result<f64> {
    if !(m.abs() <= 1.0) {
        return Err(RsbError::Domain(format!("magnetization {m} outside [-1, 1]")));
    }
    let mv = vec![m; params.n_fields()];
    let mut s = 0.0;
    for j in couplings {
        let k = CavityKernel::new(params, j)?;
        s += k.vertex(&mv) - k.edge(&mv);
    }
    Ok(s / couplings.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: f64, c: usize) -> ModelParams {
        ModelParams::new(beta, c).unwrap()
    }

    #[test]
    fn single_edge_values() {
        let p = params(1.0, 1);
        let j = CouplingSample::new(vec![1]).unwrap();
        let m = MagnetizationVector::new(vec![0.0, 0.0]).unwrap();
        let expected = 4f64.ln() + 1f64.cosh().ln();
        assert!((psi_edge(&p, &j, &m).unwrap() - expected).abs() < 1e-14);
        let v = 4f64.ln() + 2.0 * (2.0 * 1f64.cosh()).ln();
        assert!((psi_vertex(&p, &j, &m).unwrap() - v).abs() < 1e-14);
        assert!((psi_bruteforce(PsiKind::Vertex, &p, &j, &m).unwrap() - v).abs() < 1e-14);
    }

    #[test]
    fn beta_zero_is_log_two_per_spin() {
        let p = params(0.0, 3);
        let j = CouplingSample::new(vec![1, -1, 1]).unwrap();
        let m = MagnetizationVector::new(vec![0.3, -0.9, 1.0, 0.1, 0.0, -1.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((psi_edge(&p, &j, &m).unwrap() - 6.0 * ln2).abs() < 1e-13);
        assert!((psi_vertex(&p, &j, &m).unwrap() - 8.0 * ln2).abs() < 1e-13);
        assert!((psi_bruteforce(PsiKind::Edge, &p, &j, &m).unwrap() - 6.0 * ln2).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(ModelParams::new(-1.0, 2).is_err());
        assert!(ModelParams::new(f64::NAN, 2).is_err());
        assert!(ModelParams::new(1.0, 0).is_err());
        assert!(CouplingSample::new(vec![1, 0]).is_err());
        assert!(MagnetizationVector::new(vec![1.0 + 1e-12]).is_err());
        let p = params(1.0, 13);
        let j = CouplingSample::new(vec![1; 13]).unwrap();
        let m = MagnetizationVector::new(vec![0.0; 26]).unwrap();
        assert!(matches!(psi_bruteforce(PsiKind::Edge, &p, &j, &m), Err(RsbError::SizeGuard(_))));
    }

    #[test]
    fn saturated_field_is_clamped_not_nan() {
        let p = params(800.0, 1);
        let j = CouplingSample::new(vec![-1]).unwrap();
        let m = MagnetizationVector::new(vec![1.0, 1.0]).unwrap();
        let before = clamp_events();
        let v = psi_edge(&p, &j, &m).unwrap();
        assert!(v.is_finite());
        assert!(clamp_events() > before);
    }

    #[test]
    fn toggle_uses_second_half() {
        let p = params(0.7, 2).with_2c_couplings(true);
        let j = CouplingSample::new(vec![1, -1, -1, 1]).unwrap();
        let m = MagnetizationVector::new(vec![0.2, -0.5, 0.9, 0.4]).unwrap();
        let f = psi_vertex(&p, &j, &m).unwrap();
        let b = psi_bruteforce(PsiKind::Vertex, &p, &j, &m).unwrap();
        assert!((f - b).abs() < 1e-12 * b.abs());
    }

    #[test]
    fn exact_coupling_enumeration() {
        let p = params(1.0, 3);
        let all = all_couplings(&p).unwrap();
        assert_eq!(all.len(), 8);
        let sum: i32 = all.iter().flat_map(|j| j.values().iter().map(|&v| v as i32)).sum();
        assert_eq!(sum, 0);
    }
}
