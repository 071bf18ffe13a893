//! C ABI over the simulation and mean-field solvers.
//!
//! Conventions: opaque handles created and freed by matching `_new`/`_free`
//! pairs, integer status codes (0 = success), out-parameters for values, and
//! a thread-local message retrievable via [`ws_last_error_message`] after a
//! non-zero status. No panic crosses the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use wealthshare::meanfield::{
    duplicate_to_fixed_point, relax_to_fixed_point, DiscreteShareList, RankingFunction,
};
use wealthshare::model::{FactorDistribution, ModelParams, Simulation, TaxBase};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum WsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Runtime = 3,
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message describing the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ws_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

fn guard<F: FnOnce() -> WsStatus>(f: F) -> WsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic".into());
            WsStatus::Panic
        }
    }
}

/// Opaque model parameters.
pub struct WsParams {
    inner: ModelParams,
}

/// Opaque running replica.
pub struct WsSimulation {
    inner: Simulation,
}

/// New parameter set with the binary half-doubling factor distribution,
/// default floor, and no redistribution. Returns NULL on invalid input.
#[no_mangle]
pub extern "C" fn ws_params_new(
    agents: usize,
    flat_rate: f64,
    progressivity: f64,
) -> *mut WsParams {
    match ModelParams::new(agents, flat_rate, progressivity) {
        Ok(inner) => Box::into_raw(Box::new(WsParams { inner })),
        Err(e) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
    }
}

#[no_mangle]
pub extern "C" fn ws_params_set_redistribution(
    params: *mut WsParams,
    redistribution: f64,
) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_mut() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        p.inner.redistribution = redistribution;
        match p.inner.validate() {
            Ok(()) => WsStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                WsStatus::InvalidArgument
            }
        }
    })
}

#[no_mangle]
pub extern "C" fn ws_params_set_floor(params: *mut WsParams, floor: f64) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_mut() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        p.inner.floor = floor;
        match p.inner.validate() {
            Ok(()) => WsStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                WsStatus::InvalidArgument
            }
        }
    })
}

/// Switch between taxing accumulated wealth (0) and annual gains (1).
#[no_mangle]
pub extern "C" fn ws_params_set_tax_gains(params: *mut WsParams, gains: i32) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_mut() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        p.inner.tax_base = if gains != 0 {
            TaxBase::AnnualGains
        } else {
            TaxBase::AccumulatedWealth
        };
        WsStatus::Ok
    })
}

/// Replace the growth factor distribution with `len` (factor, probability)
/// atoms.
#[no_mangle]
pub extern "C" fn ws_params_set_factors(
    params: *mut WsParams,
    factors: *const f64,
    probabilities: *const f64,
    len: usize,
) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_mut() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        if factors.is_null() || probabilities.is_null() {
            set_error("factor arrays are NULL".into());
            return WsStatus::NullPointer;
        }
        let fs = unsafe { std::slice::from_raw_parts(factors, len) };
        let qs = unsafe { std::slice::from_raw_parts(probabilities, len) };
        let atoms: Vec<(f64, f64)> = fs.iter().copied().zip(qs.iter().copied()).collect();
        match FactorDistribution::new(atoms) {
            Ok(d) => {
                p.inner.dist = d;
                WsStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                WsStatus::InvalidArgument
            }
        }
    })
}

/// # Safety
/// `params` must come from [`ws_params_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ws_params_free(params: *mut WsParams) {
    if !params.is_null() {
        drop(unsafe { Box::from_raw(params) });
    }
}

/// New replica with uniform random initial shares drawn from the stream
/// derived from (master_seed, replica).
#[no_mangle]
pub extern "C" fn ws_simulation_new(
    params: *const WsParams,
    master_seed: u64,
    replica: u64,
    out: *mut *mut WsSimulation,
) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_ref() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is NULL".into());
            return WsStatus::NullPointer;
        }
        match Simulation::new(p.inner.clone(), master_seed, replica) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(WsSimulation { inner })) };
                WsStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                WsStatus::InvalidArgument
            }
        }
    })
}

/// Advance the replica by `years` years.
#[no_mangle]
pub extern "C" fn ws_simulation_advance(sim: *mut WsSimulation, years: u64) -> WsStatus {
    guard(|| {
        let Some(s) = (unsafe { sim.as_mut() }) else {
            set_error("simulation is NULL".into());
            return WsStatus::NullPointer;
        };
        for _ in 0..years {
            if let Err(e) = s.inner.advance_year() {
                set_error(e.to_string());
                return WsStatus::Runtime;
            }
        }
        WsStatus::Ok
    })
}

/// Years simulated so far.
#[no_mangle]
pub extern "C" fn ws_simulation_year(sim: *const WsSimulation) -> u64 {
    unsafe { sim.as_ref() }.map(|s| s.inner.year()).unwrap_or(0)
}

/// Share at the given rank (1 = richest), as a double.
#[no_mangle]
pub extern "C" fn ws_simulation_share(
    sim: *const WsSimulation,
    rank: usize,
    out: *mut f64,
) -> WsStatus {
    guard(|| {
        let Some(s) = (unsafe { sim.as_ref() }) else {
            set_error("simulation is NULL".into());
            return WsStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is NULL".into());
            return WsStatus::NullPointer;
        }
        if rank == 0 || rank > s.inner.shares().len() {
            set_error(format!("rank {rank} outside 1..=N"));
            return WsStatus::InvalidArgument;
        }
        unsafe { *out = s.inner.shares()[rank - 1].value() };
        WsStatus::Ok
    })
}

/// -ln of the share at the given rank, valid down to the share floor.
#[no_mangle]
pub extern "C" fn ws_simulation_neg_log_share(
    sim: *const WsSimulation,
    rank: usize,
    out: *mut f64,
) -> WsStatus {
    guard(|| {
        let Some(s) = (unsafe { sim.as_ref() }) else {
            set_error("simulation is NULL".into());
            return WsStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is NULL".into());
            return WsStatus::NullPointer;
        }
        if rank == 0 || rank > s.inner.shares().len() {
            set_error(format!("rank {rank} outside 1..=N"));
            return WsStatus::InvalidArgument;
        }
        unsafe { *out = s.inner.neg_log_rank(rank) };
        WsStatus::Ok
    })
}

/// Sum of all shares but the richest (the residual share).
#[no_mangle]
pub extern "C" fn ws_simulation_residual_share(
    sim: *const WsSimulation,
    out: *mut f64,
) -> WsStatus {
    guard(|| {
        let Some(s) = (unsafe { sim.as_ref() }) else {
            set_error("simulation is NULL".into());
            return WsStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is NULL".into());
            return WsStatus::NullPointer;
        }
        match s.inner.residual_share() {
            Ok(v) => {
                unsafe { *out = v };
                WsStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                WsStatus::Runtime
            }
        }
    })
}

/// # Safety
/// `sim` must come from [`ws_simulation_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ws_simulation_free(sim: *mut WsSimulation) {
    if !sim.is_null() {
        drop(unsafe { Box::from_raw(sim) });
    }
}

/// Deterministic mean-field steady state via ranking-function relaxation.
/// Fills `out` (length `params.agents`) with the descending share list.
#[no_mangle]
pub extern "C" fn ws_meanfield_steady_shares(
    params: *const WsParams,
    tolerance: f64,
    max_iterations: u64,
    out: *mut f64,
    out_len: usize,
) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_ref() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is NULL".into());
            return WsStatus::NullPointer;
        }
        if out_len < p.inner.agents {
            set_error(format!(
                "output buffer holds {out_len} but N = {}",
                p.inner.agents
            ));
            return WsStatus::InvalidArgument;
        }
        let init = RankingFunction::uniform_guess(p.inner.agents);
        match relax_to_fixed_point(&p.inner, &init, tolerance, max_iterations) {
            Ok((state, _)) => {
                let shares = state.ranking.share_list().expect("discretised state");
                let slice = unsafe { std::slice::from_raw_parts_mut(out, p.inner.agents) };
                slice.copy_from_slice(&shares);
                WsStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                WsStatus::Runtime
            }
        }
    })
}

/// Mean-field steady state via the duplicate-order-average procedure.
#[no_mangle]
pub extern "C" fn ws_meanfield_duplicate_shares(
    params: *const WsParams,
    tolerance: f64,
    max_iterations: u64,
    out: *mut f64,
    out_len: usize,
) -> WsStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_ref() }) else {
            set_error("params is NULL".into());
            return WsStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out is NULL".into());
            return WsStatus::NullPointer;
        }
        if out_len < p.inner.agents {
            set_error(format!(
                "output buffer holds {out_len} but N = {}",
                p.inner.agents
            ));
            return WsStatus::InvalidArgument;
        }
        let init = DiscreteShareList::uniform(p.inner.agents);
        match duplicate_to_fixed_point(&p.inner, &init, tolerance, max_iterations) {
            Ok((fixed, _)) => {
                let slice = unsafe { std::slice::from_raw_parts_mut(out, p.inner.agents) };
                slice.copy_from_slice(fixed.shares());
                WsStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                WsStatus::Runtime
            }
        }
    })
}
