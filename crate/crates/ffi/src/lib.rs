//! C interface to the inference runtime.
//!
//! A model is loaded from a checkpoint into an opaque handle. Every function
//! returns a [`DdiStatus`]; on failure, a description of the most recent
//! error on the calling thread is available from
//! [`ddi_last_error_message`]. Images are passed as raw `H × W × C` bytes in
//! the layout of the training data; the model normalizes them itself.
//!
//! Handles are immutable after loading and may be shared between threads for
//! concurrent inference. Freeing a handle while another thread uses it is
//! undefined behavior.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ddi::backbone::Network;
use ddi::costmodel::{EnergyParams, Metric};
use ddi::data::Normalization;
use ddi::numerics::{Checkpoint, Tensor};
use ddi::runtime::{adaptive_infer, budgeted_infer, BranchPolicy, Budget, InferenceResult};
use ddi::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdiStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was out of range or had the wrong length.
    InvalidArgument = 2,
    /// The checkpoint is missing, unreadable or malformed.
    Checkpoint = 3,
    /// No exit fits within the budget.
    BudgetInfeasible = 4,
    /// Numerical failure during inference.
    Numerical = 5,
    Io = 6,
    /// Any other failure, including a caught panic.
    Internal = 7,
}

/// Cost metric for reported costs and budgets.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdiMetric {
    /// One unit per executed block.
    Uniform = 0,
    /// Multiply-accumulate count.
    Flops = 1,
    /// Energy under the default hardware parameters.
    Energy = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdiBranchPolicy {
    /// Evaluate every branch reached before the budget runs out.
    Always = 0,
    /// Evaluate a branch only when the next exit might not fit the budget.
    Opportunistic = 1,
}

/// Outcome of one inference.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DdiResult {
    /// Predicted class.
    pub prediction: u32,
    /// Exit that produced the prediction: 1 for the first branch, up to
    /// the `num_exits` of `ddi_model_info` for the final head.
    pub exit: u32,
    /// Cost actually spent, gate overhead included.
    pub realized_cost: f64,
    /// Fraction of gated blocks skipped.
    pub skip_ratio: f64,
    /// Smallest budget that admits the first exit; set on `BudgetInfeasible`.
    pub min_budget: f64,
}

/// Opaque model handle.
pub struct DdiModel {
    net: Network,
    norm: Normalization,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DdiStatus {
    match e {
        Error::Checkpoint(_) | Error::Config(_) => DdiStatus::Checkpoint,
        Error::Shape { .. } => DdiStatus::InvalidArgument,
        Error::BudgetInfeasible { .. } => DdiStatus::BudgetInfeasible,
        Error::NonFinite { .. } => DdiStatus::Numerical,
        Error::Io(_) => DdiStatus::Io,
        _ => DdiStatus::Internal,
    }
}

fn fail(status: DdiStatus, msg: impl Into<String>) -> DdiStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> DdiStatus) -> DdiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DdiStatus::Internal, format!("panic: {}", msg))
        }
    }
}

fn metric_of(m: DdiMetric) -> Metric {
    match m {
        DdiMetric::Uniform => Metric::Uniform,
        DdiMetric::Flops => Metric::Flops,
        DdiMetric::Energy => Metric::Energy(EnergyParams::default()),
    }
}

impl DdiModel {
    fn load(path: &Path) -> ddi::Result<Self> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
        }
        let net = Network::from_checkpoint(&Checkpoint::load(path)?)?;
        let (mean, std) = net.norm_stats();
        Ok(DdiModel { net, norm: Normalization { mean, std } })
    }

    fn image(&self, pixels: &[u8]) -> ddi::Result<Tensor> {
        let [c, h, w] = self.net.input_shape();
        if pixels.len() != c * h * w {
            return Err(Error::Shape { op: "ddi_infer".into(), detail: format!("expected {} bytes ({}x{}x{}), got {}", c * h * w, h, w, c, pixels.len()) });
        }
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[ch * h * w + p] = self.norm.normalize(pixels[p * c + ch], ch);
            }
        }
        Tensor::new(vec![1, c, h, w], out)
    }
}

fn write_result(out: &mut DdiResult, r: &InferenceResult) {
    *out = DdiResult {
        prediction: r.prediction as u32,
        exit: r.exit as u32,
        realized_cost: r.realized_cost,
        skip_ratio: r.skip_ratio,
        min_budget: 0.0,
    };
}

/// Loads a checkpoint written by the training tools.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
/// On success `*out` receives a handle to release with `ddi_model_free`.
#[no_mangle]
pub unsafe extern "C" fn ddi_model_load(path: *const c_char, out: *mut *mut DdiModel) -> DdiStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(DdiStatus::NullArgument, "ddi_model_load: null argument");
        }
        *out = std::ptr::null_mut();
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(DdiStatus::InvalidArgument, "ddi_model_load: path is not valid UTF-8");
        };
        match DdiModel::load(Path::new(p)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                DdiStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `ddi_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ddi_model_free(model: *mut DdiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Expected input geometry and label space.
///
/// # Safety
/// `model` must be a live handle; each output pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddi_model_info(
    model: *const DdiModel,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    num_classes: *mut usize,
    num_exits: *mut usize,
) -> DdiStatus {
    guard(|| {
        if model.is_null() || height.is_null() || width.is_null() || channels.is_null() || num_classes.is_null() || num_exits.is_null() {
            return fail(DdiStatus::NullArgument, "ddi_model_info: null argument");
        }
        let m = &*model;
        let [c, h, w] = m.net.input_shape();
        *height = h;
        *width = w;
        *channels = c;
        *num_classes = m.net.num_classes();
        *num_exits = m.net.num_exits();
        DdiStatus::Ok
    })
}

/// Inference with hard gates through the final head; no early exit.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `len` readable
/// bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ddi_infer_adaptive(
    model: *const DdiModel,
    pixels: *const u8,
    len: usize,
    metric: DdiMetric,
    out: *mut DdiResult,
) -> DdiStatus {
    guard(|| {
        if model.is_null() || pixels.is_null() || out.is_null() {
            return fail(DdiStatus::NullArgument, "ddi_infer_adaptive: null argument");
        }
        let m = &*model;
        let run = || adaptive_infer(&m.net, &m.image(std::slice::from_raw_parts(pixels, len))?, &metric_of(metric));
        match run() {
            Ok(r) => {
                write_result(&mut *out, &r);
                DdiStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Inference that stops at the deepest exit reachable within `limit`.
/// On `BudgetInfeasible`, `out->min_budget` holds the cost of the first exit.
///
/// # Safety
/// As for `ddi_infer_adaptive`.
#[no_mangle]
pub unsafe extern "C" fn ddi_infer_budgeted(
    model: *const DdiModel,
    pixels: *const u8,
    len: usize,
    metric: DdiMetric,
    limit: f64,
    policy: DdiBranchPolicy,
    out: *mut DdiResult,
) -> DdiStatus {
    guard(|| {
        if model.is_null() || pixels.is_null() || out.is_null() {
            return fail(DdiStatus::NullArgument, "ddi_infer_budgeted: null argument");
        }
        let m = &*model;
        let budget = match Budget::new(metric_of(metric), limit) {
            Ok(b) => b,
            Err(e) => return fail(DdiStatus::InvalidArgument, e.to_string()),
        };
        let policy = match policy {
            DdiBranchPolicy::Always => BranchPolicy::Always,
            DdiBranchPolicy::Opportunistic => BranchPolicy::Opportunistic,
        };
        let run = || budgeted_infer(&m.net, &m.image(std::slice::from_raw_parts(pixels, len))?, &budget, policy);
        match run() {
            Ok(r) => {
                write_result(&mut *out, &r);
                DdiStatus::Ok
            }
            Err(e) => {
                *out = DdiResult::default();
                if let Error::BudgetInfeasible { min_budget, .. } = e {
                    (*out).min_budget = min_budget;
                }
                fail(status_of(&e), e.to_string())
            }
        }
    })
}

/// Copies the calling thread's most recent error message into `buf`,
/// truncated and always NUL-terminated. Returns the full message length in
/// bytes, excluding the terminator, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ddi_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && cap > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ddi_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}
