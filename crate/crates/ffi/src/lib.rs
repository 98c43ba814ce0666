//! C ABI over the `kvtriage` core.
//!
//! Every fallible function returns a [`KvtStatus`]. On failure the message
//! is kept per thread and read with [`kvt_last_error_message`]. Heads are
//! opaque [`KvtHead`] handles created by `kvt_head_read` or
//! `kvt_head_from_raw` and released with `kvt_head_free`.
//!
//! Enum-valued inputs (`metric`, `allocation`, ...) are plain `uint32_t`
//! holding one of the `KVT_*` constants so out-of-range values are reported
//! instead of being undefined behavior.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use kvtriage::eviction::{evict_head, evict_layer, Allocation, Budget, EvictionConfig, LogitScale, Selector};
use kvtriage::perturbation::{output_perturbation, theta_bound, Metric, SelectionMask};
use kvtriage::selection::{select_attention_only, select_perturbation_constrained, SelectionConfig};
use kvtriage::{io, Error, HeadSnapshot, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Budget = 5,
    Io = 6,
    Format = 7,
    DegenerateMask = 8,
    Panic = 9,
}

#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtMetric {
    L1 = 0,
    L2 = 1,
}

#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtAllocation {
    Flat = 0,
    Adaptive = 1,
}

#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtSelector {
    PerturbationConstrained = 0,
    AttentionOnly = 1,
}

#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvtLogitScale {
    SqrtHeadDim = 0,
    None = 1,
}

/// Opaque head handle.
pub struct KvtHead {
    inner: HeadSnapshot,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KvtHeadDims {
    pub layer: u32,
    pub head: u32,
    /// Cache entries.
    pub entries: usize,
    /// Stored query rows.
    pub window_rows: usize,
    pub head_dim: usize,
    pub model_dim: usize,
}

/// Eviction settings. Obtain defaults from `kvt_eviction_config_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KvtEvictionConfig {
    /// Per-head budget as a fraction of entries, used when `budget_count` is 0.
    pub budget_fraction: f64,
    /// Per-head budget in entries; 0 selects `budget_fraction`.
    pub budget_count: usize,
    pub window: usize,
    pub pool_kernel: usize,
    /// `KVT_ALLOCATION_*`
    pub allocation: u32,
    /// `KVT_SELECTOR_*`
    pub selector: u32,
    pub alpha: f64,
    pub epsilon: f64,
    /// `KVT_METRIC_*`
    pub metric: u32,
    /// `KVT_LOGIT_SCALE_*`
    pub logit_scale: u32,
    /// Adaptive allocation floor; used only when `has_floor` is nonzero.
    pub floor: usize,
    pub has_floor: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_for(err: &Error) -> KvtStatus {
    match err {
        Error::InvalidArgument(_) | Error::InvalidKernel(_) | Error::OracleTooLarge { .. } | Error::EmptyLogits => {
            KvtStatus::InvalidArgument
        }
        Error::Shape(_) | Error::WindowExceedsEntries { .. } | Error::WindowExceedsQueries { .. } => KvtStatus::Shape,
        Error::NonFinite(_) => KvtStatus::NonFinite,
        Error::BudgetExceedsEntries { .. } | Error::BudgetBelowWindow { .. } | Error::InfeasibleAllocation(_) => {
            KvtStatus::Budget
        }
        Error::Io { .. } => KvtStatus::Io,
        Error::NotAHeadDump { .. }
        | Error::UnsupportedVersion { .. }
        | Error::LengthMismatch { .. }
        | Error::NonFinitePayload { .. }
        | Error::Report { .. } => KvtStatus::Format,
        Error::DegenerateMask | Error::OverlappingMasks(_) => KvtStatus::DegenerateMask,
    }
}

struct Failure(KvtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_for(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(KvtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: String) -> Failure {
    Failure(KvtStatus::InvalidArgument, message)
}

/// Runs `f`, recording any error or panic for `kvt_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KvtStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KvtStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            KvtStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn head_ref<'a>(head: *const KvtHead) -> Result<&'a HeadSnapshot, Failure> {
    head.as_ref().map(|h| &h.inner).ok_or_else(|| null("head"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn metric_of(v: u32) -> Result<Metric, Failure> {
    match v {
        x if x == KvtMetric::L1 as u32 => Ok(Metric::L1),
        x if x == KvtMetric::L2 as u32 => Ok(Metric::L2),
        _ => Err(invalid(format!("unknown metric {v}"))),
    }
}

fn eviction_config(c: &KvtEvictionConfig) -> Result<EvictionConfig, Failure> {
    let allocation = match c.allocation {
        x if x == KvtAllocation::Flat as u32 => Allocation::Flat,
        x if x == KvtAllocation::Adaptive as u32 => Allocation::Adaptive,
        v => return Err(invalid(format!("unknown allocation {v}"))),
    };
    let selector = match c.selector {
        x if x == KvtSelector::PerturbationConstrained as u32 => Selector::PerturbationConstrained,
        x if x == KvtSelector::AttentionOnly as u32 => Selector::AttentionOnly,
        v => return Err(invalid(format!("unknown selector {v}"))),
    };
    let logit_scale = match c.logit_scale {
        x if x == KvtLogitScale::SqrtHeadDim as u32 => LogitScale::SqrtHeadDim,
        x if x == KvtLogitScale::None as u32 => LogitScale::None,
        v => return Err(invalid(format!("unknown logit scale {v}"))),
    };
    let cfg = EvictionConfig {
        budget: if c.budget_count > 0 {
            Budget::Count(c.budget_count)
        } else {
            Budget::Fraction(c.budget_fraction)
        },
        window: c.window,
        pool_kernel: c.pool_kernel,
        allocation,
        selector,
        alpha: c.alpha,
        epsilon: c.epsilon,
        metric: metric_of(c.metric)?,
        logit_scale,
        floor: (c.has_floor != 0).then_some(c.floor),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_keep(mask: &SelectionMask, out: &mut [u8]) {
    for (o, &k) in out.iter_mut().zip(mask.keep()) {
        *o = u8::from(k);
    }
}

fn keep_mask(keep: &[u8]) -> SelectionMask {
    SelectionMask::from_keep(keep.iter().map(|&k| k != 0).collect())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn kvt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next `kvt_*` call on the same thread.
#[no_mangle]
pub extern "C" fn kvt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Default eviction settings: 20% budget, window 32, kernel 7, flat
/// allocation, perturbation-constrained selector, alpha 0.5, epsilon 1e-4,
/// L1, scaled logits.
#[no_mangle]
pub extern "C" fn kvt_eviction_config_default() -> KvtEvictionConfig {
    let d = EvictionConfig::default();
    KvtEvictionConfig {
        budget_fraction: match d.budget {
            Budget::Fraction(f) => f,
            Budget::Count(_) => 0.2,
        },
        budget_count: 0,
        window: d.window,
        pool_kernel: d.pool_kernel,
        allocation: KvtAllocation::Flat as u32,
        selector: KvtSelector::PerturbationConstrained as u32,
        alpha: d.alpha,
        epsilon: d.epsilon,
        metric: KvtMetric::L1 as u32,
        logit_scale: KvtLogitScale::SqrtHeadDim as u32,
        floor: 0,
        has_floor: 0,
    }
}

/// Reads a HeadDump file into a new handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvt_head_read(path: *const c_char, out: *mut *mut KvtHead) -> KvtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = io::read_head_dump(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(KvtHead { inner }));
        Ok(())
    })
}

/// Builds a head from row-major `f32` arrays: `q` is `window_rows × head_dim`,
/// `keys` and `values` are `entries × head_dim`, `w_o` is
/// `head_dim × model_dim`. The data is copied.
///
/// # Safety
/// Each array must hold the stated number of floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kvt_head_from_raw(
    layer: u32,
    head: u32,
    entries: usize,
    window_rows: usize,
    head_dim: usize,
    model_dim: usize,
    q: *const f32,
    keys: *const f32,
    values: *const f32,
    w_o: *const f32,
    out: *mut *mut KvtHead,
) -> KvtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let size = |r: usize, c: usize| {
            r.checked_mul(c)
                .ok_or_else(|| invalid(format!("{r} x {c} overflows")))
        };
        let m = |ptr, r, c, what| -> Result<Matrix, Failure> {
            let data = slice(ptr, size(r, c)?, what)?.to_vec();
            Ok(Matrix::new(r, c, data)?)
        };
        let inner = HeadSnapshot::new(
            layer,
            head,
            m(q, window_rows, head_dim, "q")?,
            m(keys, entries, head_dim, "keys")?,
            m(values, entries, head_dim, "values")?,
            m(w_o, head_dim, model_dim, "w_o")?,
        )?;
        *out = Box::into_raw(Box::new(KvtHead { inner }));
        Ok(())
    })
}

/// Writes a head as a HeadDump file (atomically).
///
/// # Safety
/// `head` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn kvt_head_write(head: *const KvtHead, path: *const c_char) -> KvtStatus {
    guard(|| {
        io::write_head_dump(head_ref(head)?, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `head` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn kvt_head_dims(head: *const KvtHead, out: *mut KvtHeadDims) -> KvtStatus {
    guard(|| {
        let h = head_ref(head)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = KvtHeadDims {
            layer: h.layer,
            head: h.head,
            entries: h.entries(),
            window_rows: h.window_rows(),
            head_dim: h.head_dim(),
            model_dim: h.model_dim(),
        };
        Ok(())
    })
}

/// Copies the row-major keys (`entries × head_dim` floats) into `out`.
///
/// # Safety
/// `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn kvt_head_copy_keys(head: *const KvtHead, out: *mut f32, len: usize) -> KvtStatus {
    guard(|| {
        let h = head_ref(head)?;
        let data = h.keys.data();
        if len != data.len() {
            return Err(Failure(KvtStatus::Shape, format!("need {} floats, got {len}", data.len())));
        }
        slice_mut(out, len, "out")?.copy_from_slice(data);
        Ok(())
    })
}

/// Releases a head. Null is ignored.
///
/// # Safety
/// `head` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kvt_head_free(head: *mut KvtHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Top-`budget` entries of `a`; writes 1 (kept) or 0 into `keep_out`.
///
/// # Safety
/// `a` and `keep_out` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn kvt_select_attention_only(
    a: *const f64,
    n: usize,
    budget: usize,
    keep_out: *mut u8,
) -> KvtStatus {
    guard(|| {
        let mask = select_attention_only(slice(a, n, "a")?, budget)?;
        write_keep(&mask, slice_mut(keep_out, n, "keep_out")?);
        Ok(())
    })
}

/// Two-stage perturbation-constrained selection. `keep_out` receives 1/0;
/// `stage_out`, if non-null, receives 0 (evicted), 1 or 2 (selecting stage).
///
/// # Safety
/// `a`, `value_norms`, `keep_out` and a non-null `stage_out` must hold `n`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn kvt_select_perturbation_constrained(
    a: *const f64,
    value_norms: *const f64,
    n: usize,
    budget: usize,
    alpha: f64,
    epsilon: f64,
    keep_out: *mut u8,
    stage_out: *mut u8,
) -> KvtStatus {
    guard(|| {
        let cfg = SelectionConfig::new(budget).with_alpha(alpha).with_epsilon(epsilon);
        let s = select_perturbation_constrained(slice(a, n, "a")?, slice(value_norms, n, "value_norms")?, &cfg)?;
        write_keep(&s.combined, slice_mut(keep_out, n, "keep_out")?);
        if !stage_out.is_null() {
            let stages = slice_mut(stage_out, n, "stage_out")?;
            for (i, o) in stages.iter_mut().enumerate() {
                *o = if s.stage1.is_kept(i) {
                    1
                } else if s.stage2.is_kept(i) {
                    2
                } else {
                    0
                };
            }
        }
        Ok(())
    })
}

/// Actual output perturbation `‖(A − A')𝒱‖` for a keep mask; `projected` is
/// the row-major `n × d` matrix `V·W_O`.
///
/// # Safety
/// `a` and `keep` must hold `n` elements, `projected` `n·d`, `out` one.
#[no_mangle]
pub unsafe extern "C" fn kvt_output_perturbation(
    a: *const f64,
    projected: *const f32,
    n: usize,
    d: usize,
    keep: *const u8,
    metric: u32,
    out: *mut f64,
) -> KvtStatus {
    guard(|| {
        let len = n.checked_mul(d).ok_or_else(|| invalid("n x d overflows".into()))?;
        let projected = Matrix::new(n, d, slice(projected, len, "projected")?.to_vec())?;
        let mask = keep_mask(slice(keep, n, "keep")?);
        let l = output_perturbation(slice(a, n, "a")?, &mask, &projected, metric_of(metric)?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = l;
        Ok(())
    })
}

/// Upper bound θ on the output perturbation of a keep mask.
///
/// # Safety
/// `a`, `value_norms` and `keep` must hold `n` elements, `out` one.
#[no_mangle]
pub unsafe extern "C" fn kvt_theta_bound(
    a: *const f64,
    value_norms: *const f64,
    n: usize,
    keep: *const u8,
    out: *mut f64,
) -> KvtStatus {
    guard(|| {
        let mask = keep_mask(slice(keep, n, "keep")?);
        let t = theta_bound(slice(a, n, "a")?, &mask, slice(value_norms, n, "value_norms")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.theta;
        Ok(())
    })
}

/// Evicts one head down to `budget` entries. `keep_out` (if non-null, `n`
/// bytes) receives the mask; `compacted_out` (if non-null) a new handle with
/// only the kept rows, to be released with `kvt_head_free`.
///
/// # Safety
/// Pointers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn kvt_evict_head(
    head: *const KvtHead,
    budget: usize,
    config: *const KvtEvictionConfig,
    keep_out: *mut u8,
    compacted_out: *mut *mut KvtHead,
) -> KvtStatus {
    guard(|| {
        let h = head_ref(head)?;
        let cfg = eviction_config(config.as_ref().ok_or_else(|| null("config"))?)?;
        let ev = evict_head(h, budget, &cfg)?;
        if !keep_out.is_null() {
            write_keep(ev.mask(), slice_mut(keep_out, h.entries(), "keep_out")?);
        }
        if !compacted_out.is_null() {
            *compacted_out = Box::into_raw(Box::new(KvtHead { inner: ev.compacted }));
        }
        Ok(())
    })
}

/// Evicts a layer of `count` heads sharing one cache length `n`. Per-head
/// budgets go to `budgets_out` (`count` values) and masks to `keep_out`
/// (`count × n` bytes, head-major).
///
/// # Safety
/// `heads` must hold `count` valid handles; outputs must be sized as above.
#[no_mangle]
pub unsafe extern "C" fn kvt_evict_layer(
    heads: *const *const KvtHead,
    count: usize,
    config: *const KvtEvictionConfig,
    budgets_out: *mut usize,
    keep_out: *mut u8,
) -> KvtStatus {
    guard(|| {
        let cfg = eviction_config(config.as_ref().ok_or_else(|| null("config"))?)?;
        let snaps = slice(heads, count, "heads")?
            .iter()
            .map(|&h| head_ref(h).cloned())
            .collect::<Result<Vec<_>, _>>()?;
        let result = evict_layer(&snaps, &cfg)?;
        let n = snaps[0].entries();
        slice_mut(budgets_out, count, "budgets_out")?.copy_from_slice(&result.allocation.per_head);
        let keep = slice_mut(keep_out, count * n, "keep_out")?;
        for (chunk, ev) in keep.chunks_mut(n).zip(&result.heads) {
            write_keep(ev.mask(), chunk);
        }
        Ok(())
    })
}
