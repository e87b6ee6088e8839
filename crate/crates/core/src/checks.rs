//! Randomized property suites shared by the `invariants` command and the
//! integration tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cavity::{
    psi_bruteforce, psi_edge, psi_vertex, sample_couplings, CavityKernel, MagnetizationVector, ModelParams, PsiKind,
};
use crate::error::Result;
use crate::nested::McPlan;
use crate::parisi_measure::DiscreteParisiMeasure;
use crate::rsb_tree::{HierarchicalMeasure, RsbExponents};
use crate::stats::{z_score, SeedStream};
use crate::wiener::{
    derivative_check_mu, derivative_check_psi, martingale_check, rsb_expectation, rsb_expectation_measures,
    TanhFeatures, WienerFunctional,
};

/// One checked case: `value` against `reference`, `score` is the statistic
/// compared with the threshold (relative error, z, or excess over a bound).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: usize,
    pub value: f64,
    pub reference: f64,
    pub se: f64,
    pub score: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub violations: usize,
    /// Largest score over all cases.
    pub worst: f64,
    pub passed: bool,
    pub rows: Vec<CaseRow>,
}

impl SuiteReport {
    fn from_rows(suite: &str, rows: Vec<CaseRow>) -> Self {
        let violations = rows.iter().filter(|r| !r.ok).count();
        let worst = rows.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
        Self { suite: suite.into(), cases: rows.len(), violations, worst, passed: violations == 0, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,value,reference,se,score,ok\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.case, r.value, r.reference, r.se, r.score, r.ok));
        }
        s
    }
}

/// Random discrete measure with `k` interior levels; `x_1 >= 0.05`.
pub fn random_measure(k: usize, rng: &mut ChaCha8Rng) -> DiscreteParisiMeasure {
    let mut q: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.95)).collect();
    q.sort_by(f64::total_cmp);
    q.insert(0, 0.0);
    q.push(1.0);
    let mut x: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.95)).collect();
    x.sort_by(f64::total_cmp);
    x.push(1.0);
    DiscreteParisiMeasure::from_grid(&q, &x).expect("valid random measure")
}

/// Measure on the same grid with a pointwise larger CDF.
pub fn dominating_measure(mu: &DiscreteParisiMeasure, rng: &mut ChaCha8Rng) -> DiscreteParisiMeasure {
    let mut x = Vec::with_capacity(mu.x().len() - 1);
    let mut prev: f64 = 0.0;
    for &xl in &mu.x()[1..] {
        let v = (xl + (1.0 - xl) * rng.gen_range(0.0..0.8)).max(prev).min(1.0);
        x.push(v);
        prev = v;
    }
    DiscreteParisiMeasure::from_grid(mu.q(), &x).expect("valid dominating measure")
}

/// Factorized cavity functions against literal enumeration, relative error.
pub fn cavity_suite(cases: usize, tol: f64, seed: SeedStream) -> Result<SuiteReport> {
    let mut rng = seed.rng();
    let mut rows = Vec::with_capacity(cases);
    for case in 0..cases {
        let c = rng.gen_range(1..=4);
        let p = ModelParams::new(rng.gen_range(0.0..2.0), c)?.with_2c_couplings(case % 4 == 3);
        let j = sample_couplings(&p, &mut rng);
        let m = MagnetizationVector::new((0..2 * c).map(|_| rng.gen_range(-1.0..=1.0)).collect())?;
        let kind = if case % 2 == 0 { PsiKind::Edge } else { PsiKind::Vertex };
        let value = match kind {
            PsiKind::Edge => psi_edge(&p, &j, &m)?,
            PsiKind::Vertex => psi_vertex(&p, &j, &m)?,
        };
        let reference = psi_bruteforce(kind, &p, &j, &m)?;
        let score = ((value - reference) / reference.abs().max(1e-300)).abs();
        rows.push(CaseRow { case, value, reference, se: 0.0, score, ok: score <= tol });
    }
    Ok(SuiteReport::from_rows("cavity", rows))
}

/// Girsanov weight mean and the pathwise bound on `K = 2` trees with
/// `Psi(m) = log(1 + m_1 m_2 tanh(beta J))`. Score is `|z|`; a case also
/// fails on any pathwise violation.
pub fn martingale_suite(instances: usize, paths: usize, seed: SeedStream) -> Result<SuiteReport> {
    let mut rows = Vec::with_capacity(instances);
    for case in 0..instances {
        let mut rng = seed.substream(case as u64).rng();
        let tree = HierarchicalMeasure::random(&[2, 2, 2], 0.95, &mut rng)?;
        let x1 = rng.gen_range(0.05..0.9);
        let x2 = rng.gen_range(x1..1.0);
        let x = RsbExponents::new(vec![0.0, x1, x2, 1.0])?;
        let p = ModelParams::new(rng.gen_range(0.5..2.0), 1)?;
        let kernel = CavityKernel::new(&p, &sample_couplings(&p, &mut rng))?;
        let offset = kernel.edge(&[0.0, 0.0]);
        let psi = |m: &[f64]| kernel.edge(m) - offset;
        let r = martingale_check(&psi, &tree, &x, 2, paths, seed.substream(1000 + case as u64))?;
        let score = r.z.abs();
        rows.push(CaseRow {
            case,
            value: r.weight.value,
            reference: 1.0,
            se: r.weight.std_error,
            score,
            ok: score <= 3.0 && r.bound_violations == 0,
        });
    }
    Ok(SuiteReport::from_rows("martingale", rows))
}

/// `|Phi| <= sup |Psi|` on random bounded functionals and measures. Score
/// is the excess `(|Phi| - bound) / SE`.
pub fn bound_suite(instances: usize, plan: &McPlan, seed: SeedStream) -> Result<SuiteReport> {
    let mut rows = Vec::with_capacity(instances);
    for case in 0..instances {
        let mut rng = seed.substream(case as u64).rng();
        let k = rng.gen_range(1..=2);
        let mu = random_measure(k, &mut rng);
        let copies = rng.gen_range(1..=2);
        let psi = TanhFeatures::random(copies, k + 2, 3, 2.0, &mut rng);
        let bound = psi.sup_bound().expect("bounded features");
        let est = rsb_expectation(&psi, &mu, plan, seed.substream(1000 + case as u64))?;
        let score = z_score(est.value.abs() - bound, est.std_error);
        rows.push(CaseRow { case, value: est.value, reference: bound, se: est.std_error, score, ok: score <= 3.0 });
    }
    Ok(SuiteReport::from_rows("bound", rows))
}

/// `Phi(mu_1) <= Phi(mu_2)` for `mu_1 <= mu_2` on shared noise. Score is
/// `(Phi(mu_1) - Phi(mu_2)) / SE` of the paired difference.
pub fn monotonicity_suite(pairs: usize, plan: &McPlan, seed: SeedStream) -> Result<SuiteReport> {
    let mut rows = Vec::with_capacity(pairs);
    for case in 0..pairs {
        let mut rng = seed.substream(case as u64).rng();
        let k = rng.gen_range(1..=2);
        let mu1 = random_measure(k, &mut rng);
        let mu2 = dominating_measure(&mu1, &mut rng);
        let psi = TanhFeatures::random(2, k + 2, 3, 1.5, &mut rng);
        let out = rsb_expectation_measures(&psi, &[&mu1, &mu2], plan, seed.substream(1000 + case as u64))?;
        let diff = out.contrast(&[(0, 1.0), (1, -1.0)]);
        let score = z_score(diff.value, diff.std_error);
        rows.push(CaseRow {
            case,
            value: out.estimate(0).value,
            reference: out.estimate(1).value,
            se: diff.std_error,
            score,
            ok: score <= 3.0,
        });
    }
    Ok(SuiteReport::from_rows("monotonicity", rows))
}

/// Derivative formulas against central differences with common random
/// numbers, in `Psi` (`in_mu = false`) or in `mu`. Score is
/// `|formula - fd| / tolerance`.
pub fn derivative_suite(instances: usize, in_mu: bool, plan: &McPlan, seed: SeedStream) -> Result<SuiteReport> {
    let mut rows = Vec::with_capacity(instances);
    for case in 0..instances {
        let mut rng = seed.substream(case as u64).rng();
        let k = rng.gen_range(1..=2);
        let mu = random_measure(k, &mut rng);
        let psi = TanhFeatures::random(1, k + 2, 3, 1.5, &mut rng);
        let run_seed = seed.substream(1000 + case as u64);
        let check = if in_mu {
            let mu_prime = random_measure_on(mu.q(), &mut rng);
            derivative_check_mu(&psi, &mu, &mu_prime, 0.05, plan, run_seed)?
        } else {
            let dpsi = TanhFeatures::random(1, k + 2, 2, 1.0, &mut rng);
            derivative_check_psi(&psi, &dpsi, &mu, 0.05, plan, run_seed)?
        };
        let gap = (check.formula.value - check.finite_difference.value).abs();
        rows.push(CaseRow {
            case,
            value: check.formula.value,
            reference: check.finite_difference.value,
            se: check.combined_se,
            score: gap / check.tolerance,
            ok: check.passed,
        });
    }
    Ok(SuiteReport::from_rows(if in_mu { "derivative_mu" } else { "derivative_psi" }, rows))
}

fn random_measure_on(q: &[f64], rng: &mut ChaCha8Rng) -> DiscreteParisiMeasure {
    let mut x: Vec<f64> = (0..q.len() - 2).map(|_| rng.gen_range(0.05..0.95)).collect();
    x.sort_by(f64::total_cmp);
    x.push(1.0);
    DiscreteParisiMeasure::from_grid(q, &x).expect("valid random measure")
}
