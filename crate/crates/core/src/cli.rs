//! The `rsb` command line: flat TOML settings with overrides, one JSON
//! artifact per run, CSV diagnostics where a command has them.
//!
//! Settings are resolved in order: built-in defaults, `--config` file,
//! `--set key=value` pairs, explicit flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cavity::{
    clamp_events, psi_bruteforce, psi_edge, psi_vertex, CouplingPlan, CouplingSample, MagnetizationVector, ModelParams,
    PsiKind,
};
use crate::checks::{bound_suite, cavity_suite, derivative_suite, martingale_suite, monotonicity_suite, SuiteReport};
use crate::error::{Result, RsbError};
use crate::full_rsb::{
    equivalence_check, full_rsb_run, measure_from, q_invariance_check, Budgets, CavityMagnetizationSpec,
};
use crate::nested::McPlan;
use crate::optimizer::{default_exponents, optimize_krsb, optimize_rs, refinement_scan, uniform_tree, KrsbBudget};
use crate::oracle::quenched_estimate;
use crate::parisi_measure::{discretize, sup_distance, DiscreteParisiMeasure, GeneralParisiMeasure};
use crate::rsb_tree::{krsb_functional, Evaluator, HierarchicalMeasure, RsbExponents};
use crate::stats::SeedStream;
use crate::wiener::{diagnostics_csv, NoiseMode};

/// `git describe` of the build, or the crate version outside a checkout.
pub const VERSION: &str = env!("RSB_VERSION");

/// Schema version of the JSON artifacts.
pub const SCHEMA: u32 = 1;

/// Environment variable naming the artifact directory.
pub const OUT_DIR_ENV: &str = "RSB_OUT_DIR";

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CHECK_FAILED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "rsb", version = VERSION, about = "RSB free-energy functionals for the Ising 2-spin model on random regular graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat TOML settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one setting, e.g. `--set inner=[32,16]`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Master seed. Stochastic commands fall back to 0 with a warning.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Artifact directory; defaults to $RSB_OUT_DIR, then `rsb-out`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    pub c: Option<usize>,

    #[arg(long, global = true)]
    pub beta: Option<f64>,

    /// Use `J_{i+c}` on the second leg of the vertex function.
    #[arg(long, global = true)]
    pub vertex_uses_2c_couplings: bool,

    /// Number of sampled coupling draws; 0 enumerates all of them.
    #[arg(long, global = true)]
    pub j_samples: Option<usize>,

    #[arg(long, global = true)]
    pub outer: Option<usize>,

    /// Inner samples per level, comma separated; the last entry repeats.
    #[arg(long, global = true, value_delimiter = ',')]
    pub inner: Option<Vec<usize>>,

    #[arg(long, global = true)]
    pub no_bias_correction: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Edge and vertex cavity functions at one point.
    EvalPsi {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        m: Option<Vec<f64>>,
        #[arg(long = "J", alias = "j", value_delimiter = ',', allow_hyphen_values = true)]
        j: Option<Vec<i8>>,
    },
    /// K-RSB functional of a tree.
    EvalKrsb {
        #[command(flatten)]
        tree: TreeArgs,
        #[arg(long, value_enum)]
        evaluator: Option<EvaluatorArg>,
    },
    /// Full-RSB functional of a tree embedded on a grid.
    EvalFullRsb {
        #[command(flatten)]
        tree: TreeArgs,
        /// Discrete measure as JSON (inline or a path); defaults to the grid and exponents.
        #[arg(long)]
        mu: Option<String>,
    },
    /// Exact tree DP against the Wiener Monte Carlo.
    Equivalence {
        #[command(flatten)]
        tree: TreeArgs,
    },
    /// Same tree and exponents on two grids.
    QInvariance {
        #[command(flatten)]
        tree: TreeArgs,
        #[arg(long, value_delimiter = ',')]
        grid_b: Option<Vec<f64>>,
    },
    /// Derivative formulas against finite differences on random instances.
    DerivativeCheck {
        #[arg(long, value_enum)]
        kind: Option<DerivativeKind>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Staircase approximation of a general measure.
    DiscretizeMu {
        /// `power:a` for `q^a`, or `smoothstep`.
        #[arg(long)]
        cdf: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// RS, K-RSB or refinement-scan optimization.
    Optimize {
        /// `0` is RS.
        #[arg(long)]
        k: Option<usize>,
        /// Ascending K list for a warm-started scan.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        #[arg(long)]
        branching: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Exact finite-size quenched free energy.
    Oracle {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Finite-size quenched estimate against an optimized 1-RSB bound.
    FranzLeone {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Randomized property suites.
    Invariants {
        #[arg(long, value_enum)]
        suite: Option<SuiteArg>,
        #[arg(long)]
        instances: Option<usize>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct TreeArgs {
    /// Tree JSON, inline or a path. Random when absent.
    #[arg(long)]
    pub tree: Option<String>,
    /// Exponents `x_0 = 0, ..., x_{K+1} = 1`.
    #[arg(long, value_delimiter = ',')]
    pub x: Option<Vec<f64>>,
    /// Grid `q_0 = 0, ..., q_{K+1} = 1`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// K of the random tree used when `--tree` is absent.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub branching: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorArg {
    Exact,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivativeKind {
    Psi,
    Mu,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteArg {
    Cavity,
    Martingale,
    Bound,
    Monotonicity,
    Derivative,
    All,
}

/// Every setting a command can read. Absent sampling sizes fall back to a
/// per-command default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub beta: f64,
    pub c: usize,
    pub vertex_uses_2c_couplings: bool,
    pub seed: Option<u64>,
    pub j_samples: usize,
    pub outer: Option<usize>,
    pub inner: Option<Vec<usize>>,
    pub bias_correction: bool,
    pub total_outer: usize,
    pub mesh: usize,
    pub tree: Option<String>,
    pub x: Option<Vec<f64>>,
    pub grid: Option<Vec<f64>>,
    pub grid_b: Option<Vec<f64>>,
    pub mu: Option<String>,
    pub k: usize,
    pub k_list: Option<Vec<usize>>,
    pub branching: usize,
    pub budget: usize,
    pub evaluator: EvaluatorArg,
    pub m: Option<Vec<f64>>,
    #[serde(rename = "J")]
    pub j: Option<Vec<i8>>,
    pub n: usize,
    pub samples: usize,
    pub cdf: String,
    pub tol: f64,
    pub kind: DerivativeKind,
    pub instances: Option<usize>,
    pub suite: SuiteArg,
    pub paths: usize,
    pub step: f64,
    pub allowance: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            beta: 1.0,
            c: 2,
            vertex_uses_2c_couplings: false,
            seed: None,
            j_samples: 0,
            outer: None,
            inner: None,
            bias_correction: true,
            total_outer: 100_000,
            mesh: 0,
            tree: None,
            x: None,
            grid: None,
            grid_b: None,
            mu: None,
            k: 1,
            k_list: None,
            branching: 2,
            budget: 600,
            evaluator: EvaluatorArg::Exact,
            m: None,
            j: None,
            n: 16,
            samples: 100,
            cdf: "power:0.5".into(),
            tol: 1.0 / 64.0,
            kind: DerivativeKind::Both,
            instances: None,
            suite: SuiteArg::All,
            paths: 100_000,
            step: 0.05,
            allowance: 0.08,
        }
    }
}

impl Settings {
    pub fn params(&self) -> Result<ModelParams> {
        Ok(ModelParams::new(self.beta, self.c)?.with_2c_couplings(self.vertex_uses_2c_couplings))
    }

    pub fn couplings(&self) -> CouplingPlan {
        CouplingPlan::from_count(self.j_samples)
    }

    fn plan(&self, outer: usize, inner: &[usize]) -> McPlan {
        McPlan {
            outer: self.outer.unwrap_or(outer),
            inner: self.inner.clone().unwrap_or_else(|| inner.to_vec()),
            bias_correction: self.bias_correction,
        }
    }

    fn budgets(&self) -> Budgets {
        Budgets {
            couplings: self.couplings(),
            total_outer: self.outer.unwrap_or(self.total_outer),
            inner: self.inner.clone().unwrap_or_else(|| vec![64]),
            bias_correction: self.bias_correction,
        }
    }

    fn noise_mode(&self) -> NoiseMode {
        if self.mesh == 0 {
            NoiseMode::Normalized
        } else {
            NoiseMode::BrownianPath { mesh: self.mesh }
        }
    }
}

fn insert<T: Serialize>(table: &mut toml::Table, key: &str, v: &Option<T>) -> Result<()> {
    if let Some(v) = v {
        let value = toml::Value::try_from(v).map_err(|e| RsbError::Parse(format!("{key}: {e}")))?;
        table.insert(key.into(), value);
    }
    Ok(())
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| RsbError::Parse(format!("override `{s}` is not KEY=VALUE")))?;
    let k = k.trim().replace('-', "_");
    let doc = format!("v = {}", v.trim());
    let value = match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        // bare words are strings
        Err(_) => toml::Value::String(v.trim().to_string()),
    };
    Ok((k, value))
}

impl Cli {
    /// Resolves the settings of this invocation.
    pub fn settings(&self) -> Result<Settings> {
        let mut table = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| RsbError::Io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| RsbError::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in &self.overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        insert(&mut table, "seed", &self.seed)?;
        insert(&mut table, "c", &self.c)?;
        insert(&mut table, "beta", &self.beta)?;
        insert(&mut table, "j_samples", &self.j_samples)?;
        insert(&mut table, "outer", &self.outer)?;
        insert(&mut table, "inner", &self.inner)?;
        if self.vertex_uses_2c_couplings {
            table.insert("vertex_uses_2c_couplings".into(), true.into());
        }
        if self.no_bias_correction {
            table.insert("bias_correction".into(), false.into());
        }
        match &self.command {
            Command::EvalPsi { m, j } => {
                insert(&mut table, "m", m)?;
                insert(&mut table, "J", j)?;
            }
            Command::EvalKrsb { tree, evaluator } => {
                tree.apply(&mut table)?;
                insert(&mut table, "evaluator", evaluator)?;
            }
            Command::EvalFullRsb { tree, mu } => {
                tree.apply(&mut table)?;
                insert(&mut table, "mu", mu)?;
            }
            Command::Equivalence { tree } => tree.apply(&mut table)?,
            Command::QInvariance { tree, grid_b } => {
                tree.apply(&mut table)?;
                insert(&mut table, "grid_b", grid_b)?;
            }
            Command::DerivativeCheck { kind, instances } => {
                insert(&mut table, "kind", kind)?;
                insert(&mut table, "instances", instances)?;
            }
            Command::DiscretizeMu { cdf, tol } => {
                insert(&mut table, "cdf", cdf)?;
                insert(&mut table, "tol", tol)?;
            }
            Command::Optimize { k, k_list, branching, budget } => {
                insert(&mut table, "k", k)?;
                insert(&mut table, "k_list", k_list)?;
                insert(&mut table, "branching", branching)?;
                insert(&mut table, "budget", budget)?;
            }
            Command::Oracle { n, samples } => {
                insert(&mut table, "n", n)?;
                insert(&mut table, "samples", samples)?;
            }
            Command::FranzLeone { n, samples, budget } => {
                insert(&mut table, "n", n)?;
                insert(&mut table, "samples", samples)?;
                insert(&mut table, "budget", budget)?;
            }
            Command::Invariants { suite, instances } => {
                insert(&mut table, "suite", suite)?;
                insert(&mut table, "instances", instances)?;
            }
        }
        Settings::deserialize(toml::Value::Table(table)).map_err(|e| RsbError::Parse(format!("settings: {e}")))
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("rsb-out"))
    }
}

impl TreeArgs {
    fn apply(&self, table: &mut toml::Table) -> Result<()> {
        insert(table, "tree", &self.tree)?;
        insert(table, "x", &self.x)?;
        insert(table, "grid", &self.grid)?;
        insert(table, "k", &self.k)?;
        insert(table, "branching", &self.branching)
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::EvalPsi { .. } => "eval-psi",
            Command::EvalKrsb { .. } => "eval-krsb",
            Command::EvalFullRsb { .. } => "eval-full-rsb",
            Command::Equivalence { .. } => "equivalence",
            Command::QInvariance { .. } => "q-invariance",
            Command::DerivativeCheck { .. } => "derivative-check",
            Command::DiscretizeMu { .. } => "discretize-mu",
            Command::Optimize { .. } => "optimize",
            Command::Oracle { .. } => "oracle",
            Command::FranzLeone { .. } => "franz-leone",
            Command::Invariants { .. } => "invariants",
        }
    }

    fn is_stochastic(&self, s: &Settings) -> bool {
        match self {
            Command::EvalPsi { .. } | Command::DiscretizeMu { .. } => false,
            Command::EvalKrsb { .. } => s.evaluator == EvaluatorArg::Mc || s.j_samples > 0 || s.tree.is_none(),
            Command::Optimize { .. } => s.j_samples > 0 || s.evaluator == EvaluatorArg::Mc,
            _ => true,
        }
    }
}

/// Hex SHA-256 of the command and its resolved settings.
pub fn config_digest(command: &str, settings: &Settings) -> String {
    let canonical = serde_json::to_string(&json!({ "command": command, "settings": settings })).expect("serializable");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Result of a command before it is written out.
pub struct Report {
    pub result: Value,
    /// `(file name, contents)` pairs.
    pub csv: Vec<(String, String)>,
    /// `false` when a statistical check failed.
    pub passed: bool,
}

impl Report {
    fn ok(result: Value) -> Self {
        Self { result, csv: Vec::new(), passed: true }
    }
}

fn load_text(arg: &str) -> Result<String> {
    let t = arg.trim_start();
    if t.starts_with('{') || t.starts_with('[') {
        Ok(arg.to_string())
    } else {
        fs::read_to_string(arg).map_err(|e| RsbError::Io(format!("{arg}: {e}")))
    }
}

/// Tree, exponents and grid from the settings; absent parts are a random
/// tree of the requested shape, `x_l = l / (K+1)` and a uniform grid.
fn tree_setup(s: &Settings, seed: SeedStream) -> Result<(HierarchicalMeasure, RsbExponents, Vec<f64>)> {
    let tree = match &s.tree {
        Some(t) => HierarchicalMeasure::from_json(&load_text(t)?)?,
        None => HierarchicalMeasure::random(&vec![s.branching; s.k + 1], 0.9, &mut seed.substream(u64::MAX).rng())?,
    };
    let k = tree.depth() - 1;
    let x = match &s.x {
        Some(x) => RsbExponents::new(x.clone())?,
        None => default_exponents(k),
    };
    x.check_tree(&tree)?;
    let grid = s.grid.clone().unwrap_or_else(|| (0..=k + 1).map(|l| l as f64 / (k + 1) as f64).collect());
    Ok((tree, x, grid))
}

fn general_cdf(spec: &str) -> Result<GeneralParisiMeasure> {
    match spec.split_once(':') {
        Some(("power", a)) => {
            let a: f64 = a.trim().parse().map_err(|_| RsbError::Parse(format!("bad exponent in `{spec}`")))?;
            if !(a > 0.0) {
                return Err(RsbError::InvalidParameter("power exponent must be > 0".into()));
            }
            GeneralParisiMeasure::new(move |q: f64| q.powf(a))
        }
        None if spec == "smoothstep" => GeneralParisiMeasure::new(|q: f64| q * q * (3.0 - 2.0 * q)),
        _ => Err(RsbError::Parse(format!("unknown cdf `{spec}`; use power:a or smoothstep"))),
    }
}

fn suite_json(r: &SuiteReport) -> Value {
    json!({ "suite": r.suite, "cases": r.cases, "violations": r.violations, "worst": r.worst, "passed": r.passed })
}

/// Runs one command with resolved settings.
pub fn execute(command: &Command, s: &Settings, seed: SeedStream) -> Result<Report> {
    match command {
        Command::EvalPsi { .. } => {
            let p = s.params()?;
            let m = s.m.clone().ok_or_else(|| RsbError::InvalidParameter("--m is required".into()))?;
            let j = CouplingSample::new(s.j.clone().unwrap_or_else(|| vec![1; p.coupling_len()]))?;
            let m = MagnetizationVector::new(m)?;
            let edge = psi_edge(&p, &j, &m)?;
            let vertex = psi_vertex(&p, &j, &m)?;
            let mut r = json!({ "psi_edge": edge, "psi_vertex": vertex, "difference": vertex - edge });
            if p.n_fields() <= 16 {
                r["psi_edge_bruteforce"] = json!(psi_bruteforce(PsiKind::Edge, &p, &j, &m)?);
                r["psi_vertex_bruteforce"] = json!(psi_bruteforce(PsiKind::Vertex, &p, &j, &m)?);
            }
            r["clamp_events"] = json!(clamp_events());
            Ok(Report::ok(r))
        }
        Command::EvalKrsb { .. } => {
            let (tree, x, _) = tree_setup(s, seed)?;
            let evaluator = match s.evaluator {
                EvaluatorArg::Exact => Evaluator::Exact,
                EvaluatorArg::Mc => Evaluator::MonteCarlo(s.plan(4096, &[64])),
            };
            let v = krsb_functional(&tree, &x, &s.params()?, s.couplings(), &evaluator, seed)?;
            Ok(Report::ok(json!({
                "value": v.value, "std_error": v.std_error, "n_samples": v.n_samples,
                "tree": tree.to_spec(), "x": x.values(),
            })))
        }
        Command::EvalFullRsb { .. } => {
            let (tree, x, grid) = tree_setup(s, seed)?;
            let mu = match &s.mu {
                Some(m) => DiscreteParisiMeasure::from_json(&load_text(m)?)?,
                None => measure_from(&grid, &x)?,
            };
            let spec = CavityMagnetizationSpec::new(tree.clone(), grid.clone())?;
            let plan = s.plan(4096, &[64]);
            let r = full_rsb_run(&spec, &mu, &s.params()?, s.couplings(), &plan, seed, s.noise_mode())?;
            Ok(Report {
                result: json!({
                    "value": r.estimate.value, "std_error": r.estimate.std_error,
                    "per_coupling": r.per_coupling, "tree": tree.to_spec(), "grid": grid, "mu": mu,
                }),
                csv: vec![("levels.csv".into(), diagnostics_csv(&r.levels))],
                passed: true,
            })
        }
        Command::Equivalence { .. } => {
            let (tree, x, grid) = tree_setup(s, seed)?;
            let r = equivalence_check(&tree, &x, &grid, &s.params()?, &s.budgets(), seed)?;
            Ok(Report {
                result: json!({ "report": r, "tree": tree.to_spec(), "x": x.values(), "grid": grid }),
                csv: vec![],
                passed: r.passed,
            })
        }
        Command::QInvariance { .. } => {
            let (tree, x, grid) = tree_setup(s, seed)?;
            // default second grid: the first one with interior points squared
            let grid_b = s.grid_b.clone().unwrap_or_else(|| grid.iter().map(|q| q * q).collect());
            let r = q_invariance_check(&tree, &x, &s.params()?, &grid, &grid_b, &s.budgets(), seed)?;
            Ok(Report {
                result: json!({ "report": r, "grid_a": grid, "grid_b": grid_b }),
                csv: vec![],
                passed: r.passed,
            })
        }
        Command::DerivativeCheck { .. } => {
            let plan = s.plan(4096, &[16]);
            let n = s.instances.unwrap_or(10);
            let kinds: &[bool] = match s.kind {
                DerivativeKind::Psi => &[false],
                DerivativeKind::Mu => &[true],
                DerivativeKind::Both => &[false, true],
            };
            let reports = kinds
                .iter()
                .enumerate()
                .map(|(i, &in_mu)| derivative_suite(n, in_mu, &plan, seed.substream(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(suites_report(reports))
        }
        Command::DiscretizeMu { .. } => {
            let mu = general_cdf(&s.cdf)?;
            let d = discretize(&mu, s.tol)?;
            let dist = sup_distance(&mu, &d);
            Ok(Report {
                result: json!({ "mu": d, "k": d.k(), "sup_distance": dist, "tol": s.tol }),
                csv: vec![],
                passed: dist <= s.tol,
            })
        }
        Command::Optimize { .. } => optimize(s, seed),
        Command::Oracle { .. } => {
            let q = quenched_estimate(s.n, s.c, s.beta, s.samples, seed)?;
            Ok(Report::ok(json!({ "estimate": q.value, "std_error": q.std_error, "n_samples": q.n_samples })))
        }
        Command::FranzLeone { .. } => {
            let p = s.params()?;
            let q = quenched_estimate(s.n, s.c, s.beta, s.samples, seed.substream(0))?;
            let budget = krsb_budget(s);
            let rs = optimize_rs(&p, budget.couplings, budget.max_evals.max(50), seed.substream(1))?;
            let start = (uniform_tree(&[s.branching; 2], rs.m_star)?, default_exponents(1));
            let one = optimize_krsb(1, s.branching, &p, &budget, seed.substream(1), Some(start))?;
            let gap = one.value.value - q.value;
            Ok(Report {
                result: json!({
                    "bound": one.value.value, "bound_std_error": one.value.std_error,
                    "estimate": q.value, "estimate_std_error": q.std_error,
                    "gap": gap, "allowance": s.allowance, "rs_value": rs.value,
                }),
                csv: vec![],
                passed: gap >= -s.allowance,
            })
        }
        Command::Invariants { .. } => {
            let plan = s.plan(1024, &[16]);
            let pick = |suite: SuiteArg| s.suite == suite || s.suite == SuiteArg::All;
            let mut reports = Vec::new();
            if pick(SuiteArg::Cavity) {
                reports.push(cavity_suite(s.instances.unwrap_or(1000), 1e-12, seed.substream(1))?);
            }
            if pick(SuiteArg::Martingale) {
                reports.push(martingale_suite(s.instances.unwrap_or(5), s.paths, seed.substream(4))?);
            }
            if pick(SuiteArg::Bound) {
                reports.push(bound_suite(s.instances.unwrap_or(50), &plan, seed.substream(5))?);
            }
            if pick(SuiteArg::Monotonicity) {
                reports.push(monotonicity_suite(s.instances.unwrap_or(25), &plan, seed.substream(6))?);
            }
            if pick(SuiteArg::Derivative) {
                let dplan = s.plan(4096, &[16]);
                let n = s.instances.unwrap_or(10);
                reports.push(derivative_suite(n, false, &dplan, seed.substream(7))?);
                reports.push(derivative_suite(n, true, &dplan, seed.substream(8))?);
            }
            Ok(suites_report(reports))
        }
    }
}

fn suites_report(reports: Vec<SuiteReport>) -> Report {
    let passed = reports.iter().all(|r| r.passed);
    let csv = reports.iter().map(|r| (format!("{}.csv", r.suite), r.to_csv())).collect();
    Report {
        result: json!({ "suites": reports.iter().map(suite_json).collect::<Vec<_>>(), "passed": passed }),
        csv,
        passed,
    }
}

fn krsb_budget(s: &Settings) -> KrsbBudget {
    KrsbBudget {
        max_evals: s.budget,
        couplings: s.couplings(),
        evaluator: match s.evaluator {
            EvaluatorArg::Exact => Evaluator::Exact,
            EvaluatorArg::Mc => Evaluator::MonteCarlo(s.plan(1024, &[32])),
        },
        step: 0.5,
    }
}

fn optimize(s: &Settings, seed: SeedStream) -> Result<Report> {
    let p = s.params()?;
    let budget = krsb_budget(s);
    if let Some(ks) = &s.k_list {
        let rows = refinement_scan(&p, ks, s.branching, &budget, seed)?;
        let mut csv = String::from("k,value,se,start_value,evaluations,budget\n");
        for r in &rows {
            let k = r.k.map_or("RS".to_string(), |k| k.to_string());
            csv.push_str(&format!("{k},{},{},{},{},{}\n", r.value, r.se, r.start_value, r.evaluations, r.budget));
        }
        return Ok(Report { result: json!({ "scan": rows }), csv: vec![("scan.csv".into(), csv)], passed: true });
    }
    let rs = optimize_rs(&p, budget.couplings, s.budget.max(50), seed)?;
    if s.k == 0 {
        return Ok(Report::ok(json!({ "m_star": rs.m_star, "value": rs.value, "evaluations": rs.evaluations })));
    }
    let start = (uniform_tree(&vec![s.branching; s.k + 1], rs.m_star)?, default_exponents(s.k));
    let opt = optimize_krsb(s.k, s.branching, &p, &budget, seed, Some(start))?;
    let mut csv = String::from("iteration,best,digest,se\n");
    for r in &opt.trace {
        csv.push_str(&format!("{},{},{},{}\n", r.iteration, r.best, r.digest, r.se));
    }
    Ok(Report {
        result: json!({
            "value": opt.value.value, "std_error": opt.value.std_error, "initial_value": opt.initial_value,
            "rs_value": rs.value, "tree": opt.tree, "x": opt.x,
            "evaluations": opt.evaluations, "budget_exhausted": opt.budget_exhausted,
        }),
        csv: vec![("trace.csv".into(), csv)],
        passed: true,
    })
}

fn write_artifacts(dir: &Path, command: &str, artifact: &Value, csv: &[(String, String)]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| RsbError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{command}.json"));
    fs::write(&path, serde_json::to_string_pretty(artifact)?)?;
    for (name, text) in csv {
        fs::write(dir.join(format!("{command}-{name}")), text)?;
    }
    Ok(path)
}

/// Parses the arguments, runs the command and maps the outcome to an exit
/// code: 0 success, 1 usage or input error, 2 failed statistical check.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::from(EXIT_OK),
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

/// Runs a parsed invocation; `Ok(false)` means a statistical check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let settings = cli.settings()?;
    let name = cli.command.name();
    let seed = match settings.seed {
        Some(s) => s,
        None => {
            if cli.command.is_stochastic(&settings) {
                log::warn!("no --seed given; using the fixed seed 0");
            }
            0
        }
    };
    let report = execute(&cli.command, &settings, SeedStream::new(seed))?;
    let artifact = json!({
        "schema": SCHEMA,
        "command": name,
        "version": VERSION,
        "config_digest": config_digest(name, &settings),
        "seed": seed,
        "settings": settings,
        "passed": report.passed,
        "result": report.result,
    });
    let path = write_artifacts(&cli.out_dir(), name, &artifact, &report.csv)?;
    println!("{}", serde_json::to_string_pretty(&artifact)?);
    log::info!("wrote {}", path.display());
    Ok(report.passed)
}
