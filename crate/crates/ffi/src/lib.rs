//! C ABI over `rsb_core`.
#![allow(clippy::too_many_arguments)]
//!
//! Every fallible function returns an [`RsbStatus`] and writes results
//! through out-pointers. On failure the message is kept per thread and
//! read with [`rsb_last_error`]. Objects are opaque handles created by
//! `*_new` / `*_from_json` and released by the matching `*_free`.
//! Panics never cross the boundary; they map to `RSB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rsb_core::cavity::{psi_edge, psi_vertex, CouplingPlan, CouplingSample, MagnetizationVector, ModelParams};
use rsb_core::full_rsb::{full_rsb_run, CavityMagnetizationSpec};
use rsb_core::nested::McPlan;
use rsb_core::optimizer::optimize_rs;
use rsb_core::oracle::quenched_estimate;
use rsb_core::parisi_measure::DiscreteParisiMeasure;
use rsb_core::rsb_tree::{krsb_functional, Evaluator, HierarchicalMeasure, RsbExponents};
use rsb_core::wiener::NoiseMode;
use rsb_core::{EstimateWithError, RsbError, SeedStream};

/// Outcome of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    Domain = 3,
    SizeGuard = 4,
    GridMismatch = 5,
    NonMonotone = 6,
    Unbounded = 7,
    GraphSampling = 8,
    Parse = 9,
    Io = 10,
    Panic = 11,
}

impl From<&RsbError> for RsbStatus {
    fn from(e: &RsbError) -> Self {
        match e {
            RsbError::InvalidParameter(_) => RsbStatus::InvalidParameter,
            RsbError::Domain(_) => RsbStatus::Domain,
            RsbError::SizeGuard(_) => RsbStatus::SizeGuard,
            RsbError::GridMismatch(_) => RsbStatus::GridMismatch,
            RsbError::NonMonotone(_) => RsbStatus::NonMonotone,
            RsbError::Unbounded(_) => RsbStatus::Unbounded,
            RsbError::GraphSampling(_) => RsbStatus::GraphSampling,
            RsbError::Parse(_) => RsbStatus::Parse,
            RsbError::Io(_) => RsbStatus::Io,
        }
    }
}

/// Value with its Monte Carlo standard error (0 for exact results).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RsbEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: u64,
}

impl From<EstimateWithError> for RsbEstimate {
    fn from(e: EstimateWithError) -> Self {
        Self { value: e.value, std_error: e.std_error, n_samples: e.n_samples }
    }
}

/// Model parameters `(beta, c)` and the vertex coupling convention.
pub struct RsbParams(ModelParams);

/// Hierarchical measure on magnetizations.
pub struct RsbTree(HierarchicalMeasure);

/// Discrete Parisi measure.
pub struct RsbMeasure(DiscreteParisiMeasure);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Null(&'static str),
    Core(RsbError),
}

impl From<RsbError> for Fail {
    fn from(e: RsbError) -> Self {
        Fail::Core(e)
    }
}

type Out<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> Out<()>) -> RsbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsbStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RsbStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            RsbStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            RsbStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Out<&'a T> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Out<&'a mut T> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Out<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string(p: *const c_char, what: &'static str) -> Out<String> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|e| Fail::Core(RsbError::Parse(format!("{what} is not UTF-8: {e}"))))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rsb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rsb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a parameter handle.
///
/// # Safety
/// `out_params` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rsb_params_new(
    beta: f64,
    c: usize,
    vertex_uses_2c_couplings: bool,
    out_params: *mut *mut RsbParams,
) -> RsbStatus {
    guard(|| {
        let slot = out(out_params, "out_params")?;
        let p = ModelParams::new(beta, c)?.with_2c_couplings(vertex_uses_2c_couplings);
        *slot = boxed(RsbParams(p));
        Ok(())
    })
}

/// Releases a parameter handle. Null is ignored.
///
/// # Safety
/// `params` must be null or a handle from [`rsb_params_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rsb_params_free(params: *mut RsbParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Edge and vertex cavity functions at magnetizations `m` (length `2c`)
/// and couplings `j` (entries `+1` or `-1`).
///
/// # Safety
/// `params` must be a live handle, `j` and `m` must point to `j_len` and
/// `m_len` readable elements, `out_edge` and `out_vertex` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_psi(
    params: *const RsbParams,
    j: *const i8,
    j_len: usize,
    m: *const f64,
    m_len: usize,
    out_edge: *mut f64,
    out_vertex: *mut f64,
) -> RsbStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        let j = CouplingSample::new(slice(j, j_len, "j")?.to_vec())?;
        let m = MagnetizationVector::new(slice(m, m_len, "m")?.to_vec())?;
        let (oe, ov) = (out(out_edge, "out_edge")?, out(out_vertex, "out_vertex")?);
        *oe = psi_edge(p, &j, &m)?;
        *ov = psi_vertex(p, &j, &m)?;
        Ok(())
    })
}

/// Parses a tree from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_tree` writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_tree_from_json(json: *const c_char, out_tree: *mut *mut RsbTree) -> RsbStatus {
    guard(|| {
        let slot = out(out_tree, "out_tree")?;
        let t = HierarchicalMeasure::from_json(&string(json, "json")?)?;
        *slot = boxed(RsbTree(t));
        Ok(())
    })
}

/// Number of levels below the root, `K + 1`.
///
/// # Safety
/// `tree` must be a live handle and `out_depth` writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_tree_depth(tree: *const RsbTree, out_depth: *mut usize) -> RsbStatus {
    guard(|| {
        *out(out_depth, "out_depth")? = deref(tree, "tree")?.0.depth();
        Ok(())
    })
}

/// Releases a tree handle. Null is ignored.
///
/// # Safety
/// `tree` must be null or a handle from [`rsb_tree_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rsb_tree_free(tree: *mut RsbTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// K-RSB functional of `tree` with exponents `x` (`x_0 = 0`, last `= 1`).
/// `outer == 0` selects the exact tree recursion; otherwise nested Monte
/// Carlo with `outer` paths and `inner` samples per level. `j_samples == 0`
/// averages over all coupling draws exactly.
///
/// # Safety
/// Handles must be live, `x` must point to `x_len` readable values and
/// `out_estimate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_krsb_functional(
    tree: *const RsbTree,
    x: *const f64,
    x_len: usize,
    params: *const RsbParams,
    j_samples: usize,
    outer: usize,
    inner: usize,
    seed: u64,
    out_estimate: *mut RsbEstimate,
) -> RsbStatus {
    guard(|| {
        let tree = &deref(tree, "tree")?.0;
        let p = &deref(params, "params")?.0;
        let x = RsbExponents::new(slice(x, x_len, "x")?.to_vec())?;
        let slot = out(out_estimate, "out_estimate")?;
        let evaluator = if outer == 0 {
            Evaluator::Exact
        } else {
            Evaluator::MonteCarlo(McPlan { outer, inner: vec![inner], ..McPlan::default() })
        };
        let e = krsb_functional(tree, &x, p, CouplingPlan::from_count(j_samples), &evaluator, SeedStream::new(seed))?;
        *slot = e.into();
        Ok(())
    })
}

/// Builds a measure from grid `q` (length `K + 2`, from 0 to 1) and CDF
/// values `x` (length `K + 1`, the last equal to 1).
///
/// # Safety
/// `q` and `x` must point to `q_len` and `x_len` readable values and
/// `out_measure` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_measure_new(
    q: *const f64,
    q_len: usize,
    x: *const f64,
    x_len: usize,
    out_measure: *mut *mut RsbMeasure,
) -> RsbStatus {
    guard(|| {
        let slot = out(out_measure, "out_measure")?;
        let mu = DiscreteParisiMeasure::from_grid(slice(q, q_len, "q")?, slice(x, x_len, "x")?)?;
        *slot = boxed(RsbMeasure(mu));
        Ok(())
    })
}

/// Parses a measure from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_measure` writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_measure_from_json(json: *const c_char, out_measure: *mut *mut RsbMeasure) -> RsbStatus {
    guard(|| {
        let slot = out(out_measure, "out_measure")?;
        let mu = DiscreteParisiMeasure::from_json(&string(json, "json")?)?;
        *slot = boxed(RsbMeasure(mu));
        Ok(())
    })
}

/// CDF of the measure at `q` in `[0, 1]`.
///
/// # Safety
/// `measure` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_measure_cdf(measure: *const RsbMeasure, q: f64, out_value: *mut f64) -> RsbStatus {
    guard(|| {
        let mu = &deref(measure, "measure")?.0;
        *out(out_value, "out_value")? = mu.cdf_at(q)?;
        Ok(())
    })
}

/// Releases a measure handle. Null is ignored.
///
/// # Safety
/// `measure` must be null or a live measure handle.
#[no_mangle]
pub unsafe extern "C" fn rsb_measure_free(measure: *mut RsbMeasure) {
    if !measure.is_null() {
        drop(Box::from_raw(measure));
    }
}

/// Full-RSB functional of `measure` with cavity magnetizations given by
/// `tree` placed on `grid` (one grid point per tree level plus `q = 0`).
///
/// # Safety
/// Handles must be live, `grid` must point to `grid_len` readable values
/// and `out_estimate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_full_rsb(
    tree: *const RsbTree,
    grid: *const f64,
    grid_len: usize,
    measure: *const RsbMeasure,
    params: *const RsbParams,
    j_samples: usize,
    outer: usize,
    inner: usize,
    seed: u64,
    out_estimate: *mut RsbEstimate,
) -> RsbStatus {
    guard(|| {
        let tree = &deref(tree, "tree")?.0;
        let mu = &deref(measure, "measure")?.0;
        let p = &deref(params, "params")?.0;
        let spec = CavityMagnetizationSpec::new(tree.clone(), slice(grid, grid_len, "grid")?.to_vec())?;
        let slot = out(out_estimate, "out_estimate")?;
        let plan = McPlan { outer, inner: vec![inner], ..McPlan::default() };
        let r = full_rsb_run(
            &spec,
            mu,
            p,
            CouplingPlan::from_count(j_samples),
            &plan,
            SeedStream::new(seed),
            NoiseMode::Normalized,
        )?;
        *slot = r.estimate.into();
        Ok(())
    })
}

/// Replica-symmetric optimum: writes the minimizing `m` and the value.
///
/// # Safety
/// `params` must be a live handle; `out_m` and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_optimize_rs(
    params: *const RsbParams,
    j_samples: usize,
    budget: usize,
    seed: u64,
    out_m: *mut f64,
    out_value: *mut f64,
) -> RsbStatus {
    guard(|| {
        let p = &deref(params, "params")?.0;
        let (om, ov) = (out(out_m, "out_m")?, out(out_value, "out_value")?);
        let r = optimize_rs(p, CouplingPlan::from_count(j_samples), budget, SeedStream::new(seed))?;
        *om = r.m_star;
        *ov = r.value;
        Ok(())
    })
}

/// Exact quenched free energy per spin of `n_vertices`-vertex `c`-regular
/// graphs, averaged over `n_samples` graphs and coupling draws.
///
/// # Safety
/// `out_estimate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsb_quenched_estimate(
    n_vertices: usize,
    c: usize,
    beta: f64,
    n_samples: usize,
    seed: u64,
    out_estimate: *mut RsbEstimate,
) -> RsbStatus {
    guard(|| {
        let slot = out(out_estimate, "out_estimate")?;
        *slot = quenched_estimate(n_vertices, c, beta, n_samples, SeedStream::new(seed))?.into();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn version_is_terminated() {
        let v = unsafe { CStr::from_ptr(rsb_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_out_pointer_is_reported() {
        let s = unsafe { rsb_params_new(1.0, 2, false, ptr::null_mut()) };
        assert_eq!(s, RsbStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(rsb_last_error()) };
        assert!(msg.to_str().unwrap().contains("out_params"));
    }
}
