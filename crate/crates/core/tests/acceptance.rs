//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rsb_core::cavity::{CouplingPlan, ModelParams};
use rsb_core::checks::{bound_suite, cavity_suite, derivative_suite, martingale_suite, monotonicity_suite};
use rsb_core::full_rsb::{
    equivalence_check, full_rsb_functional, q_invariance_check, Budgets, CavityMagnetizationSpec,
};
use rsb_core::nested::McPlan;
use rsb_core::optimizer::{optimize_krsb, optimize_rs, uniform_tree, KrsbBudget};
use rsb_core::oracle::quenched_estimate;
use rsb_core::parisi_measure::{discretize, DiscreteParisiMeasure, GeneralParisiMeasure};
use rsb_core::rsb_tree::{HierarchicalMeasure, RsbExponents};
use rsb_core::stats::SeedStream;
use rsb_core::wiener::{rsb_expectation, LevelCoordinate, TerminalLattice};
use rsb_core::Result;

const MASTER: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    detail: String,
}

fn seed(criterion: u64) -> SeedStream {
    SeedStream::new(MASTER).substream(criterion)
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn cavity_closed_forms() -> Result<Outcome> {
    let t = Instant::now();
    let r = cavity_suite(1000, 1e-12, seed(1))?;
    let el = t.elapsed();
    Ok(Outcome {
        passed: r.passed && el < Duration::from_secs(10),
        detail: format!("{} cases, max rel err {:.2e}, {}", r.cases, r.worst, secs(el)),
    })
}

fn zero_field_anchor() -> Result<Outcome> {
    let t = Instant::now();
    let p = ModelParams::new(1.0, 2)?;
    let tree = HierarchicalMeasure::regular(&[2, 2], |_, i| 1.0 + i as f64, |_| 0.0)?;
    let spec = CavityMagnetizationSpec::new(tree, vec![0.0, 0.5, 1.0])?;
    let mu = DiscreteParisiMeasure::new(vec![(0.0, 0.0), (0.5, 0.4), (1.0, 1.0)])?;
    let v = full_rsb_functional(&spec, &mu, &p, CouplingPlan::Exact, &McPlan::new(256, 8), seed(2))?;
    let expected = 4f64.ln() + 2.0 * 1f64.cosh().ln();
    let el = t.elapsed();
    let err = (v.value - expected).abs();
    Ok(Outcome {
        passed: err <= 1e-9 && el < Duration::from_secs(1),
        detail: format!("value {:.10} vs {:.10}, err {:.1e}, {}", v.value, expected, err, secs(el)),
    })
}

fn limit_anchors() -> Result<Outcome> {
    let t = Instant::now();
    let plan = McPlan { outer: 100_000, ..McPlan::default() };
    let psi = LevelCoordinate { level: 1 };
    let top = rsb_expectation(&psi, &DiscreteParisiMeasure::step_at_zero(), &plan, seed(3).substream(0))?;
    let bottom = rsb_expectation(&psi, &DiscreteParisiMeasure::point_mass_at_one(), &plan, seed(3).substream(1))?;
    let z_top = top.z_against(0.5);
    let z_bottom = bottom.z_against(0.0);
    let el = t.elapsed();
    Ok(Outcome {
        passed: z_top.abs() <= 3.0 && z_bottom.abs() <= 3.0 && el < Duration::from_secs(30),
        detail: format!(
            "step at 0: {:.5} ± {:.5} (z {:.2}); mass at 1: {:.5} ± {:.5} (z {:.2}); {}",
            top.value,
            top.std_error,
            z_top,
            bottom.value,
            bottom.std_error,
            z_bottom,
            secs(el)
        ),
    })
}

fn martingale_mean() -> Result<Outcome> {
    let t = Instant::now();
    let r = martingale_suite(5, 100_000, seed(4))?;
    let worst = r.rows.iter().map(|row| format!("{:.4}±{:.4}", row.value, row.se)).collect::<Vec<_>>().join(" ");
    Ok(Outcome {
        passed: r.passed,
        detail: format!("{} instances, weight means {worst}, max |z| {:.2}, {}", r.cases, r.worst, secs(t.elapsed())),
    })
}

fn sup_bound() -> Result<Outcome> {
    let t = Instant::now();
    let r = bound_suite(50, &McPlan::new(1024, 16), seed(5))?;
    Ok(Outcome {
        passed: r.passed,
        detail: format!(
            "{} instances, {} violations, max excess {:.2} SE, {}",
            r.cases,
            r.violations,
            r.worst,
            secs(t.elapsed())
        ),
    })
}

fn monotonicity() -> Result<Outcome> {
    let t = Instant::now();
    let r = monotonicity_suite(25, &McPlan::new(1024, 16), seed(6))?;
    Ok(Outcome {
        passed: r.passed,
        detail: format!(
            "{} pairs, {} violations, max (Phi1 - Phi2)/SE {:.2}, {}",
            r.cases,
            r.violations,
            r.worst,
            secs(t.elapsed())
        ),
    })
}

fn derivatives() -> Result<Outcome> {
    let t = Instant::now();
    let plan = McPlan::new(4096, 16);
    let a = derivative_suite(10, false, &plan, seed(7).substream(0))?;
    let b = derivative_suite(10, true, &plan, seed(7).substream(1))?;
    let el = t.elapsed();
    Ok(Outcome {
        passed: a.passed && b.passed && el < Duration::from_secs(300),
        detail: format!(
            "psi: {} / {} ok (max gap/tol {:.2}); mu: {} / {} ok (max gap/tol {:.2}); {}",
            a.cases - a.violations,
            a.cases,
            a.worst,
            b.cases - b.violations,
            b.cases,
            b.worst,
            secs(el)
        ),
    })
}

fn equivalence() -> Result<Outcome> {
    let t = Instant::now();
    let p = ModelParams::new(1.0, 2)?;
    let budgets = Budgets::default();
    let mut rng = seed(8).rng();
    let t1 = HierarchicalMeasure::random(&[2, 2], 0.9, &mut rng)?;
    let x1 = RsbExponents::new(vec![0.0, 0.45, 1.0])?;
    let r1 = equivalence_check(&t1, &x1, &[0.0, 0.5, 1.0], &p, &budgets, seed(8).substream(1))?;
    let t2 = HierarchicalMeasure::random(&[2, 2, 2], 0.9, &mut rng)?;
    let x2 = RsbExponents::new(vec![0.0, 0.3, 0.7, 1.0])?;
    let r2 = equivalence_check(&t2, &x2, &[0.0, 0.35, 0.7, 1.0], &p, &budgets, seed(8).substream(2))?;
    let el = t.elapsed();
    Ok(Outcome {
        passed: r1.passed && r2.passed && el < Duration::from_secs(600),
        detail: format!(
            "K=1: {:.5} vs {:.5} (z {:.2}); K=2: {:.5} vs {:.5} (z {:.2}); {}",
            r1.p_hat_k,
            r1.p_full,
            r1.z,
            r2.p_hat_k,
            r2.p_full,
            r2.z,
            secs(el)
        ),
    })
}

fn q_invariance() -> Result<Outcome> {
    let t = Instant::now();
    let p = ModelParams::new(1.0, 2)?;
    let mut rng = seed(9).rng();
    let tree = HierarchicalMeasure::random(&[2, 2], 0.9, &mut rng)?;
    let x = RsbExponents::new(vec![0.0, 0.5, 1.0])?;
    let r = q_invariance_check(&tree, &x, &p, &[0.0, 0.5, 1.0], &[0.0, 0.2, 1.0], &Budgets::default(), seed(9))?;
    Ok(Outcome {
        passed: r.passed,
        detail: format!(
            "{:.5} vs {:.5}, combined SE {:.5}, z {:.2}, {}",
            r.p_a.value,
            r.p_b.value,
            r.combined_se,
            r.z,
            secs(t.elapsed())
        ),
    })
}

fn discretization() -> Result<Outcome> {
    let t = Instant::now();
    let mu = GeneralParisiMeasure::new(|q: f64| q.sqrt())?;
    let g = |y: f64| rsb_core::cavity::ln_cosh(y);
    let lattice = TerminalLattice::default();
    let outer = McPlan::default().outer;
    let eval = |k: i32| -> Result<_> {
        let d = discretize(&mu, 2f64.powi(-k))?;
        Ok(lattice.expectation_mc(&g, &d, outer, seed(10)).0)
    };
    let reference = eval(9)?;
    let coarse = (3..=7).map(eval).collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = coarse.iter().map(|e| (e.value - reference.value).abs()).collect();
    let inversions = gaps.windows(2).filter(|w| w[1] > w[0]).count();
    let last = coarse.last().unwrap();
    let combined = last.combined_se(&reference);
    let final_gap = gaps.last().unwrap();
    Ok(Outcome {
        passed: inversions <= 1 && *final_gap <= 3.0 * combined,
        detail: format!(
            "gaps k=3..7 {}; {} inversions; final gap {:.2e} vs 3 SE {:.2e}; {}",
            gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>().join(" "),
            inversions,
            final_gap,
            3.0 * combined,
            secs(t.elapsed())
        ),
    })
}

fn refinement() -> Result<Outcome> {
    let t = Instant::now();
    let p = ModelParams::new(1.2, 3)?;
    let rs = optimize_rs(&p, CouplingPlan::Exact, 200, seed(11))?;
    let budget = KrsbBudget::default();
    let init = (uniform_tree(&[2, 2], rs.m_star)?, RsbExponents::new(vec![0.0, 0.5, 1.0])?);
    let one = optimize_krsb(1, 2, &p, &budget, seed(11), Some(init))?;
    let se = one.value.std_error;
    Ok(Outcome {
        passed: one.value.value <= rs.value + 3.0 * se,
        detail: format!(
            "RS {:.6} (m* {:.4}), 1-RSB {:.6} ± {:.1e}, {} evaluations, {}",
            rs.value,
            rs.m_star,
            one.value.value,
            se,
            one.evaluations,
            secs(t.elapsed())
        ),
    })
}

fn franz_leone() -> Result<Outcome> {
    let t = Instant::now();
    let p = ModelParams::new(0.5, 3)?;
    let q = quenched_estimate(16, 3, 0.5, 100, seed(12))?;
    let rs = optimize_rs(&p, CouplingPlan::Exact, 200, seed(12))?;
    let init = (uniform_tree(&[2, 2], rs.m_star)?, RsbExponents::new(vec![0.0, 0.5, 1.0])?);
    let one = optimize_krsb(1, 2, &p, &KrsbBudget::default(), seed(12), Some(init))?;
    let gap = one.value.value - q.value;
    Ok(Outcome {
        passed: q.value <= one.value.value + 0.08,
        detail: format!(
            "quenched N=16 {:.5} ± {:.5}, bound {:.5}, gap {:.5}, {}",
            q.value,
            q.std_error,
            one.value.value,
            gap,
            secs(t.elapsed())
        ),
    })
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 12] = [
        ("cavity closed forms vs enumeration", cavity_closed_forms),
        ("zero-field anchor", zero_field_anchor),
        ("limit anchors of Phi", limit_anchors),
        ("martingale mean and pathwise bound", martingale_mean),
        ("|Phi| <= sup |Psi|", sup_bound),
        ("monotonicity in mu", monotonicity),
        ("derivatives vs finite differences", derivatives),
        ("tree DP vs Wiener Monte Carlo", equivalence),
        ("q-grid invariance", q_invariance),
        ("discretization convergence", discretization),
        ("1-RSB below RS", refinement),
        ("Franz-Leone sanity", franz_leone),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let (ok, detail) = match f() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {n:>2} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
