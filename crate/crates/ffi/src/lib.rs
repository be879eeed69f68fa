//! C ABI over `balancekit`.
//!
//! Networks are opaque `BkNetwork` handles created from the JSON network
//! document and released with `bk_network_free`. Every fallible function
//! returns a `BkStatus`; on failure `bk_last_error` gives a message for the
//! calling thread. Strings handed out by the library are freed with
//! `bk_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use balancekit::balancing::{balance_neuron, network_deficit, run_balancing, ScheduleSpec};
use balancekit::manifold::{solve_convex, tied_layer_closed_form};
use balancekit::netgraph::{deserialize, serialize};
use balancekit::regularizer::network_cost;
use balancekit::{CostSpec, Error, Network};

pub type BkStatus = i32;

pub const BK_OK: BkStatus = 0;
pub const BK_NULL_POINTER: BkStatus = 1;
pub const BK_INVALID_UTF8: BkStatus = 2;
pub const BK_PARSE: BkStatus = 3;
pub const BK_INVALID_NETWORK: BkStatus = 4;
pub const BK_INVALID_ARGUMENT: BkStatus = 5;
/// The call finished but the iteration did not reach its tolerance.
pub const BK_NOT_CONVERGED: BkStatus = 6;
pub const BK_BUFFER_TOO_SMALL: BkStatus = 7;
/// A panic was caught at the boundary.
pub const BK_INTERNAL: BkStatus = 99;

/// Opaque network handle.
pub struct BkNetwork {
    net: Network,
}

/// Outcome of `bk_run_balancing`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BkBalanceSummary {
    pub r_before: f64,
    pub r_after: f64,
    pub steps: usize,
    pub residual: f64,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> BkStatus {
    match err {
        Error::Parse { .. } | Error::Document(_) => BK_PARSE,
        Error::UnknownUnit(_)
        | Error::NonDenseIds { .. }
        | Error::DuplicateEdge { .. }
        | Error::SelfLoop(_)
        | Error::InvalidNetwork(_)
        | Error::TopologyMismatch(_)
        | Error::Unidentifiable(_) => BK_INVALID_NETWORK,
        Error::BalancingNotConverged { .. } | Error::SolverNonConvergence { .. } => BK_NOT_CONVERGED,
        _ => BK_INVALID_ARGUMENT,
    }
}

struct Fail(BkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

/// Runs `f`, converting errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> FfiResult<BkStatus>) -> BkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            BK_INTERNAL
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(BK_NULL_POINTER, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BK_INVALID_UTF8, format!("{what} is not valid UTF-8")))
}

unsafe fn cost_arg(p: *const c_char) -> FfiResult<CostSpec> {
    Ok(str_arg(p, "cost")?.parse()?)
}

unsafe fn net_ref<'a>(p: *const BkNetwork) -> FfiResult<&'a Network> {
    p.as_ref().map(|h| &h.net).ok_or_else(|| null("network"))
}

unsafe fn net_mut<'a>(p: *mut BkNetwork) -> FfiResult<&'a mut Network> {
    p.as_mut().map(|h| &mut h.net).ok_or_else(|| null("network"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> FfiResult<&'a mut [f64]> {
    if len < need {
        return Err(Fail(BK_BUFFER_TOO_SMALL, format!("{what} holds {len} values, {need} needed")));
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn write_out<T>(p: *mut T, value: T, what: &str) -> FfiResult<BkStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(BK_OK)
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a network document and stores a new handle in `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bk_network_from_json(json: *const c_char, out: *mut *mut BkNetwork) -> BkStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = deserialize(str_arg(json, "json")?)?;
        out.write(Box::into_raw(Box::new(BkNetwork { net })));
        Ok(BK_OK)
    })
}

/// Serializes the network; free `*out` with `bk_string_free`.
///
/// # Safety
/// `net` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bk_network_to_json(net: *const BkNetwork, out: *mut *mut c_char) -> BkStatus {
    guard(|| {
        let text = serialize(net_ref(net)?)?;
        let c = CString::new(text).map_err(|e| Fail(BK_INTERNAL, e.to_string()))?;
        write_out(out, c.into_raw(), "out")
    })
}

/// # Safety
/// `net` must be NULL or a handle from `bk_network_from_json` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bk_network_free(net: *mut BkNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bk_network_num_units(net: *const BkNetwork, out: *mut usize) -> BkStatus {
    guard(|| write_out(out, net_ref(net)?.num_units(), "out"))
}

/// # Safety
/// `net` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bk_network_num_edges(net: *const BkNetwork, out: *mut usize) -> BkStatus {
    guard(|| write_out(out, net_ref(net)?.edges().len(), "out"))
}

/// Copies the edge weights, in document order, into `buf[0..num_edges]`.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bk_network_weights(net: *const BkNetwork, buf: *mut f64, len: usize) -> BkStatus {
    guard(|| {
        let w = net_ref(net)?.weights();
        out_slice(buf, len, w.len(), "buf")?.copy_from_slice(&w);
        Ok(BK_OK)
    })
}

/// Evaluates the network on one input vector.
///
/// # Safety
/// `input` must point to `n_in` doubles and `output` to `n_out` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bk_network_forward(
    net: *const BkNetwork,
    input: *const f64,
    n_in: usize,
    output: *mut f64,
    n_out: usize,
) -> BkStatus {
    guard(|| {
        let net = net_ref(net)?;
        if input.is_null() && n_in > 0 {
            return Err(null("input"));
        }
        let x = if n_in == 0 { &[][..] } else { std::slice::from_raw_parts(input, n_in) };
        let y = net.forward(x)?;
        out_slice(output, n_out, y.len(), "output")?.copy_from_slice(&y);
        Ok(BK_OK)
    })
}

/// Total weight cost under the cost spec string, e.g. `"l2"` or `"l1+0.5*l2"`.
///
/// # Safety
/// `cost` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bk_network_cost(net: *const BkNetwork, cost: *const c_char, out: *mut f64) -> BkStatus {
    guard(|| {
        let value = network_cost(net_ref(net)?, &cost_arg(cost)?);
        write_out(out, value, "out")
    })
}

/// Sum of the per-unit balance deficits.
///
/// # Safety
/// `cost` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bk_network_deficit(net: *const BkNetwork, cost: *const c_char, out: *mut f64) -> BkStatus {
    guard(|| {
        let value = network_deficit(net_ref(net)?, &cost_arg(cost)?);
        write_out(out, value, "out")
    })
}

/// Balances one hidden unit in place and writes the applied multiplier to
/// `*lambda_out` (may be NULL).
///
/// # Safety
/// `net` must be a live handle and `cost` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bk_balance_neuron(
    net: *mut BkNetwork,
    unit: usize,
    cost: *const c_char,
    lambda_out: *mut f64,
) -> BkStatus {
    guard(|| {
        let cost = cost_arg(cost)?;
        let net = net_mut(net)?;
        let (balanced, report) = balance_neuron(net, unit, &cost)?;
        *net = balanced;
        if !lambda_out.is_null() {
            lambda_out.write(report.lambda_star);
        }
        Ok(BK_OK)
    })
}

/// Runs a balancing schedule (`"stochastic:<seed>"`, `"sequential"`,
/// `"layer"`, `"layer-tied"` or `"partial"`) in place. Returns
/// `BK_NOT_CONVERGED` when the step budget runs out; the network is still
/// updated. `summary` may be NULL.
///
/// # Safety
/// `net` must be a live handle; string arguments NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bk_run_balancing(
    net: *mut BkNetwork,
    schedule: *const c_char,
    cost: *const c_char,
    tol: f64,
    max_steps: usize,
    summary: *mut BkBalanceSummary,
) -> BkStatus {
    guard(|| {
        let cost = cost_arg(cost)?;
        let spec: ScheduleSpec = str_arg(schedule, "schedule")?.parse()?;
        let net = net_mut(net)?;
        let schedule = spec.resolve(net)?.with_tol(tol).with_max_steps(max_steps);
        let (balanced, trace) = run_balancing(net, &schedule, &cost)?;
        *net = balanced;
        if !summary.is_null() {
            summary.write(BkBalanceSummary {
                r_before: trace.r_initial,
                r_after: trace.r_final(),
                steps: trace.steps.len(),
                residual: trace.residual,
                converged: trace.converged,
            });
        }
        if trace.converged {
            Ok(BK_OK)
        } else {
            Err(Fail(BK_NOT_CONVERGED, format!("not converged after {} steps", trace.steps.len())))
        }
    })
}

/// Replaces the network with its balanced state computed directly by convex
/// minimization, writing the minimal cost to `*r_star` (may be NULL).
///
/// # Safety
/// `net` must be a live handle and `cost` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bk_solve_convex(net: *mut BkNetwork, cost: *const c_char, r_star: *mut f64) -> BkStatus {
    guard(|| {
        let cost = cost_arg(cost)?;
        let net = net_mut(net)?;
        let sol = solve_convex(net, &cost)?;
        *net = sol.balanced_network(net);
        if !r_star.is_null() {
            r_star.write(sol.r_star);
        }
        Ok(BK_OK)
    })
}

/// Factors `M_i` with product 1 that equalize `M_i²·norms[i]` across a chain
/// of linear layers, where `norms[i]` is the squared norm of layer `i`.
///
/// # Safety
/// `norms` must point to `n` doubles and `out` to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn bk_tied_layer_closed_form(norms: *const f64, n: usize, out: *mut f64) -> BkStatus {
    guard(|| {
        if norms.is_null() {
            return Err(null("norms"));
        }
        let m = tied_layer_closed_form(std::slice::from_raw_parts(norms, n))?;
        out_slice(out, n, m.len(), "out")?.copy_from_slice(&m);
        Ok(BK_OK)
    })
}
