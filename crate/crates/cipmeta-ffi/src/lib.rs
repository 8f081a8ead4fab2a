//! C interface to `cipmeta`.
//!
//! Graphs are opaque handles created by [`cip_graph_from_json`] and released
//! with [`cip_graph_free`]. Every fallible call returns a [`CipStatus`]; on
//! failure the message is kept per thread and read back with
//! [`cip_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cipmeta::config_space::ConfigSpace;
use cipmeta::graph_model::{contract_graph, metastable_hierarchy, SiteGraph};
use cipmeta::ladder_resolvent::{default_lambda, kconstant_auto, DEFAULT_DEPTH};
use cipmeta::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidInput = 4,
    SpaceTooLarge = 5,
    AssumptionViolated = 6,
    Diverged = 7,
    Numerical = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for CipStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parse(_) | Error::Json(_) => CipStatus::Parse,
            Error::SpaceTooLarge { .. } => CipStatus::SpaceTooLarge,
            Error::AssumptionViolated(_) => CipStatus::AssumptionViolated,
            Error::Diverged { .. } => CipStatus::Diverged,
            Error::SingularSystem(_) | Error::NotAFlow { .. } | Error::EventCapExceeded { .. } => {
                CipStatus::Numerical
            }
            _ => CipStatus::InvalidInput,
        }
    }
}

/// Opaque site graph.
pub struct CipGraph {
    inner: SiteGraph,
}

/// Size of the metastable hierarchy.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CipHierarchySummary {
    pub n_sites: usize,
    /// `|S⋆|`.
    pub n_star: usize,
    pub kappa2: usize,
    pub kappa3: usize,
    /// Largest measure on `S₀`, or NaN when `S₀` is empty.
    pub m_star: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

/// Runs `f`, recording errors and panics for [`cip_last_error_message`].
fn guarded(f: impl FnOnce() -> Result<(), (CipStatus, String)>) -> CipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CipStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cipmeta".into());
            CipStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CipStatus, String) {
    (CipStatus::from(&e), e.to_string())
}

fn null() -> (CipStatus, String) {
    (CipStatus::NullPointer, "null pointer argument".into())
}

unsafe fn graph_ref<'a>(g: *const CipGraph) -> Result<&'a SiteGraph, (CipStatus, String)> {
    g.as_ref().map(|g| &g.inner).ok_or_else(null)
}

fn check_site(g: &SiteGraph, v: usize) -> Result<(), (CipStatus, String)> {
    if v < g.len() {
        Ok(())
    } else {
        Err((CipStatus::InvalidInput, format!("site index {v} out of range 0..{}", g.len())))
    }
}

/// Parses a graph from a NUL-terminated JSON string.
///
/// # Safety
/// `json` must be a valid C string and `out` a valid pointer. The handle
/// written to `*out` must be released with [`cip_graph_free`].
#[no_mangle]
pub unsafe extern "C" fn cip_graph_from_json(json: *const c_char, out: *mut *mut CipGraph) -> CipStatus {
    guarded(|| {
        if json.is_null() || out.is_null() {
            return Err(null());
        }
        *out = ptr::null_mut();
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| (CipStatus::InvalidUtf8, e.to_string()))?;
        let inner = SiteGraph::from_json(text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(CipGraph { inner }));
        Ok(())
    })
}

/// Releases a graph handle. Null is ignored.
///
/// # Safety
/// `g` must come from [`cip_graph_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cip_graph_free(g: *mut CipGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Number of sites, or 0 for a null handle.
///
/// # Safety
/// `g` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cip_graph_site_count(g: *const CipGraph) -> usize {
    g.as_ref().map_or(0, |g| g.inner.len())
}

/// Stationary site measure normalized to `max m = 1`, written to `out[0..len]`.
///
/// # Safety
/// `out` must point to at least `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cip_graph_measure(g: *const CipGraph, out: *mut f64, len: usize) -> CipStatus {
    guarded(|| {
        let g = graph_ref(g)?;
        if out.is_null() {
            return Err(null());
        }
        if len < g.len() {
            return Err((CipStatus::BufferTooSmall, format!("need {} doubles, got {len}", g.len())));
        }
        std::slice::from_raw_parts_mut(out, g.len()).copy_from_slice(g.measure());
        Ok(())
    })
}

/// Summary of the metastable hierarchy.
///
/// # Safety
/// `g` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cip_hierarchy_summary(g: *const CipGraph, out: *mut CipHierarchySummary) -> CipStatus {
    guarded(|| {
        let g = graph_ref(g)?;
        let out = out.as_mut().ok_or_else(null)?;
        let h = metastable_hierarchy(g);
        *out = CipHierarchySummary {
            n_sites: g.len(),
            n_star: h.s_star.len(),
            kappa2: h.kappa2(),
            kappa3: h.kappa3(),
            m_star: h.m_star.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Third-scale constant `K_xy` for condensing sites `x` and `y`.
/// A non-positive `lambda` selects the default resolvent parameter.
///
/// # Safety
/// `g` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cip_kconstant(
    g: *const CipGraph,
    x: usize,
    y: usize,
    lambda: f64,
    out: *mut f64,
) -> CipStatus {
    guarded(|| {
        let g = graph_ref(g)?;
        let out = out.as_mut().ok_or_else(null)?;
        check_site(g, x)?;
        check_site(g, y)?;
        let lambda = if lambda > 0.0 { lambda } else { default_lambda(g) };
        let cg = contract_graph(g, x, y).map_err(lib_err)?;
        let (k, _) = kconstant_auto(g, &cg, lambda, DEFAULT_DEPTH).map_err(lib_err)?;
        *out = k.value;
        Ok(())
    })
}

/// Exact capacity between the condensates `ξ^x` and `ξ^y` with `n`
/// particles and diffusion `d`, enumerating at most `budget` states.
///
/// # Safety
/// `g` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cip_exact_capacity(
    g: *const CipGraph,
    x: usize,
    y: usize,
    n: usize,
    d: f64,
    budget: usize,
    out: *mut f64,
) -> CipStatus {
    guarded(|| {
        let g = graph_ref(g)?;
        let out = out.as_mut().ok_or_else(null)?;
        check_site(g, x)?;
        check_site(g, y)?;
        let cs = ConfigSpace::enumerate(g, n, d, budget).map_err(lib_err)?;
        let chain = cs.chain(&cs.stationary_measure()).map_err(lib_err)?;
        *out = chain.capacity(&[cs.condensate(x)], &[cs.condensate(y)]).map_err(lib_err)?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf`, NUL-terminated
/// and truncated to fit. Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cip_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
