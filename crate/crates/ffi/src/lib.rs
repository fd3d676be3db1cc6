//! C ABI over `vtr-core`.
//!
//! Every entry point returns a [`VtrStatus`]. On anything other than
//! `VTR_STATUS_OK` a message is available from [`vtr_last_error_message`] on
//! the same thread until the next failing call. Traces and selections are
//! opaque handles released with their matching `_free` function. Panics are
//! caught at the boundary and reported as `VTR_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vtr_core::cost_model::{self, ModelDims};
use vtr_core::decoder_prune::{self, PruneConfig};
use vtr_core::encoder_scan::{self, ScanConfig, ScoreSource, TokenSelection};
use vtr_core::trace_io::{self, DecoderTrace, EncoderTrace, SeqLayout, VisualBoost};
use vtr_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Budget = 4,
    Degenerate = 5,
    Format = 6,
    Trace = 7,
    Layout = 8,
    Config = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

pub const VTR_SCORE_CLS: u32 = 0;
pub const VTR_SCORE_SELF_AVG: u32 = 1;

pub const VTR_INDICES_SELECTED: u32 = 0;
pub const VTR_INDICES_GLOBAL: u32 = 1;
pub const VTR_INDICES_LOCAL: u32 = 2;

/// Opaque encoder attention trace.
pub struct VtrEncoderTrace(EncoderTrace);
/// Opaque decoder attention trace.
pub struct VtrDecoderTrace(DecoderTrace);
/// Opaque stage-one selection, including merged embeddings.
pub struct VtrSelection(TokenSelection);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VtrScanConfig {
    pub r1: f64,
    pub global_fraction: f64,
    pub local_layer: usize,
    pub output_layer: usize,
    pub window_rows: usize,
    pub window_cols: usize,
    /// `VTR_SCORE_CLS` or `VTR_SCORE_SELF_AVG`.
    pub score_source: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VtrPruneConfig {
    pub k: usize,
    pub r2: f64,
    pub n_layers: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VtrModelDims {
    pub n_layers: usize,
    pub d: usize,
    pub m: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VtrEncoderSynthParams {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub locality_strength: f64,
    pub with_cls: bool,
    pub with_self_attention: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VtrDecoderSynthParams {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub n_pre_text: usize,
    pub n_visual: usize,
    pub n_post_text: usize,
    pub position_bias_strength: f64,
    pub has_visual_boost: bool,
    pub boost_first_layer: usize,
    pub boost_last_layer: usize,
    pub boost_strength: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(VtrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => VtrStatus::Shape,
            Error::Budget(_) => VtrStatus::Budget,
            Error::Degenerate(_) => VtrStatus::Degenerate,
            Error::Format { .. } => VtrStatus::Format,
            Error::Trace(_) => VtrStatus::Trace,
            Error::Layout(_) => VtrStatus::Layout,
            Error::Config { .. } => VtrStatus::Config,
            Error::Io { .. } => VtrStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VtrStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(VtrStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VtrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VtrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            VtrStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out<T: Copy>(
    src: &[T],
    buf: *mut T,
    cap: usize,
    written: *mut usize,
) -> Result<(), Failure> {
    let written = out_ref(written, "written")?;
    *written = src.len();
    if cap < src.len() {
        return Err(Failure(
            VtrStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", src.len()),
        ));
    }
    if !src.is_empty() {
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    }
    Ok(())
}

fn score_source(code: u32) -> Result<ScoreSource, Failure> {
    match code {
        VTR_SCORE_CLS => Ok(ScoreSource::Cls),
        VTR_SCORE_SELF_AVG => Ok(ScoreSource::SelfAvg),
        other => Err(invalid(format!("unknown score source {other}"))),
    }
}

fn scan_config(c: VtrScanConfig) -> Result<ScanConfig, Failure> {
    Ok(ScanConfig {
        r1: c.r1,
        global_fraction: c.global_fraction,
        local_layer: c.local_layer,
        output_layer: c.output_layer,
        window_rows: c.window_rows,
        window_cols: c.window_cols,
        score_source: score_source(c.score_source)?,
    })
}

impl From<VtrPruneConfig> for PruneConfig {
    fn from(c: VtrPruneConfig) -> Self {
        PruneConfig {
            k: c.k,
            r2: c.r2,
            n_layers: c.n_layers,
        }
    }
}

impl From<VtrModelDims> for ModelDims {
    fn from(c: VtrModelDims) -> Self {
        ModelDims {
            n_layers: c.n_layers,
            d: c.d,
            m: c.m,
        }
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vtr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `out` with the default stage-one settings.
///
/// # Safety
/// `out` must be null or point to writable memory for one `VtrScanConfig`.
#[no_mangle]
pub unsafe extern "C" fn vtr_scan_config_default(out: *mut VtrScanConfig) -> VtrStatus {
    guard(|| {
        let d = ScanConfig::default();
        *out_ref(out, "out")? = VtrScanConfig {
            r1: d.r1,
            global_fraction: d.global_fraction,
            local_layer: d.local_layer,
            output_layer: d.output_layer,
            window_rows: d.window_rows,
            window_cols: d.window_cols,
            score_source: VTR_SCORE_CLS,
        };
        Ok(())
    })
}

/// Loads an encoder bundle from a directory or its manifest path.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_encoder_load(
    path: *const c_char,
    out: *mut *mut VtrEncoderTrace,
) -> VtrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let trace = trace_io::read_encoder_bundle(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VtrEncoderTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `params` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_encoder_generate(
    params: *const VtrEncoderSynthParams,
    out: *mut *mut VtrEncoderTrace,
) -> VtrStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let out = out_ref(out, "out")?;
        let trace = trace_io::generate_synthetic_encoder(&trace_io::EncoderSynthParams {
            seed: p.seed,
            grid_h: p.grid_h,
            grid_w: p.grid_w,
            layers: p.layers,
            heads: p.heads,
            embed_dim: p.embed_dim,
            locality_strength: p.locality_strength,
            with_cls: p.with_cls,
            with_self_attention: p.with_self_attention,
        })?;
        *out = Box::into_raw(Box::new(VtrEncoderTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `trace` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vtr_encoder_free(trace: *mut VtrEncoderTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// # Safety
/// `trace` must be a live handle; `n_tokens` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_encoder_n_tokens(
    trace: *const VtrEncoderTrace,
    n_tokens: *mut usize,
) -> VtrStatus {
    guard(|| {
        *out_ref(n_tokens, "n_tokens")? = deref(trace, "trace")?.0.n_tokens();
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_decoder_load(
    path: *const c_char,
    out: *mut *mut VtrDecoderTrace,
) -> VtrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let trace = trace_io::read_decoder_bundle(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VtrDecoderTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `params` must be readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_decoder_generate(
    params: *const VtrDecoderSynthParams,
    out: *mut *mut VtrDecoderTrace,
) -> VtrStatus {
    guard(|| {
        let p = deref(params, "params")?;
        let out = out_ref(out, "out")?;
        let trace = trace_io::generate_synthetic_decoder(&trace_io::DecoderSynthParams {
            seed: p.seed,
            layers: p.layers,
            heads: p.heads,
            layout: SeqLayout {
                n_pre_text: p.n_pre_text,
                n_visual: p.n_visual,
                n_post_text: p.n_post_text,
            },
            position_bias_strength: p.position_bias_strength,
            visual_boost: p.has_visual_boost.then_some(VisualBoost {
                first_layer: p.boost_first_layer,
                last_layer: p.boost_last_layer,
                strength: p.boost_strength,
            }),
        })?;
        *out = Box::into_raw(Box::new(VtrDecoderTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `trace` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vtr_decoder_free(trace: *mut VtrDecoderTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Head-averaged attention from the last instruction token onto the visual
/// span at 1-based `layer`. `written` receives the visual-token count.
///
/// # Safety
/// `trace` must be a live handle; `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn vtr_decoder_text_scores(
    trace: *const VtrDecoderTrace,
    layer: usize,
    buf: *mut f64,
    cap: usize,
    written: *mut usize,
) -> VtrStatus {
    guard(|| {
        let dec = &deref(trace, "trace")?.0;
        let span = dec.layout().visual_span();
        let scores = decoder_prune::text_attention_scores(dec, layer, span)?;
        copy_out(scores.data(), buf, cap, written)
    })
}

/// Stage one: selects tokens and merges the rest.
///
/// # Safety
/// `trace` must be a live handle; `cfg` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_reduce_encoder(
    trace: *const VtrEncoderTrace,
    cfg: *const VtrScanConfig,
    out: *mut *mut VtrSelection,
) -> VtrStatus {
    guard(|| {
        let enc = &deref(trace, "trace")?.0;
        let cfg = scan_config(*deref(cfg, "cfg")?)?;
        let out = out_ref(out, "out")?;
        let sel = encoder_scan::reduce_encoder(enc, &cfg)?;
        *out = Box::into_raw(Box::new(VtrSelection(sel)));
        Ok(())
    })
}

/// # Safety
/// `sel` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vtr_selection_free(sel: *mut VtrSelection) {
    if !sel.is_null() {
        drop(Box::from_raw(sel));
    }
}

/// Copies ascending token indices out of a selection. `which` is one of
/// `VTR_INDICES_SELECTED`, `VTR_INDICES_GLOBAL`, `VTR_INDICES_LOCAL`.
/// `written` always receives the full count, so a first call with `cap = 0`
/// sizes the buffer.
///
/// # Safety
/// `sel` must be a live handle; `buf` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn vtr_selection_indices(
    sel: *const VtrSelection,
    which: u32,
    buf: *mut usize,
    cap: usize,
    written: *mut usize,
) -> VtrStatus {
    guard(|| {
        let s = &deref(sel, "sel")?.0;
        let src = match which {
            VTR_INDICES_SELECTED => &s.selected,
            VTR_INDICES_GLOBAL => &s.global_indices,
            VTR_INDICES_LOCAL => &s.local_indices,
            other => return Err(invalid(format!("unknown index set {other}"))),
        };
        copy_out(src, buf, cap, written)
    })
}

/// For every token, the selected token it maps to (itself if selected).
///
/// # Safety
/// `sel` must be a live handle; `buf` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn vtr_selection_assignment(
    sel: *const VtrSelection,
    buf: *mut usize,
    cap: usize,
    written: *mut usize,
) -> VtrStatus {
    guard(|| {
        let s = &deref(sel, "sel")?.0;
        let mut full: Vec<usize> = (0..s.n_tokens).collect();
        for (&u, &t) in &s.merge_assignment {
            full[u] = t;
        }
        copy_out(&full, buf, cap, written)
    })
}

/// Row-major merged embeddings, one row per selected token. `rows` and `cols`
/// receive the shape.
///
/// # Safety
/// `sel` must be a live handle; `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn vtr_selection_merged_embeddings(
    sel: *const VtrSelection,
    buf: *mut f64,
    cap: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> VtrStatus {
    guard(|| {
        let s = &deref(sel, "sel")?.0;
        let m = s
            .merged_embeddings
            .as_ref()
            .ok_or_else(|| invalid("selection has no merged embeddings"))?;
        *out_ref(rows, "rows")? = m.n_rows();
        *out_ref(cols, "cols")? = m.row_len();
        let mut n = 0;
        copy_out(m.data(), buf, cap, &mut n)
    })
}

/// Total prefill FLOPs over a per-layer visual-token profile of
/// `dims.n_layers` entries.
///
/// # Safety
/// `tokens` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_flops_total(
    tokens: *const usize,
    n: usize,
    dims: VtrModelDims,
    out: *mut f64,
) -> VtrStatus {
    guard(|| {
        let tokens = slice_arg(tokens, n, "tokens")?;
        let out = out_ref(out, "out")?;
        *out = cost_model::flops_total(tokens, &dims.into())?;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_average_retention(
    r1: f64,
    r2: f64,
    k: usize,
    n_layers: usize,
    out: *mut f64,
) -> VtrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = cost_model::average_retention(r1, r2, k, n_layers)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_solve_r1(
    target_avg: f64,
    r2: f64,
    k: usize,
    n_layers: usize,
    out: *mut f64,
) -> VtrStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = cost_model::solve_r1(target_avg, r2, k, n_layers)?;
        Ok(())
    })
}

/// Stage two over `n` text-attention scores. `counts` receives
/// `cfg.n_layers` per-layer token counts; `retained` receives the kept
/// positions, ascending, with their number in `n_retained`.
///
/// # Safety
/// `scores` must hold `n` doubles, `counts` `cfg.n_layers` elements and
/// `retained` `retained_cap` elements.
#[no_mangle]
pub unsafe extern "C" fn vtr_prune_at_layer(
    scores: *const f64,
    n: usize,
    cfg: VtrPruneConfig,
    counts: *mut usize,
    retained: *mut usize,
    retained_cap: usize,
    n_retained: *mut usize,
) -> VtrStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let profile = decoder_prune::prune_at_layer(scores, &cfg.into(), n)?;
        let mut n_counts = 0;
        copy_out(&profile.counts, counts, cfg.n_layers, &mut n_counts)?;
        copy_out(&profile.retained, retained, retained_cap, n_retained)
    })
}

/// Fraction of KV-cache entries kept under a per-layer visual-token profile,
/// relative to `n_visual_original` visual tokens at every layer.
///
/// # Safety
/// `counts` must hold `n_layers` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vtr_kv_fraction(
    counts: *const usize,
    n_layers: usize,
    n_visual_original: usize,
    n_text_total: usize,
    out: *mut f64,
) -> VtrStatus {
    guard(|| {
        let counts = slice_arg(counts, n_layers, "counts")?;
        if counts.is_empty() {
            return Err(invalid("need at least one layer"));
        }
        let out = out_ref(out, "out")?;
        let profile = decoder_prune::LayerTokenProfile {
            counts: counts.to_vec(),
            retained: Vec::new(),
            prune_layer: n_layers,
            n_merged: counts[0],
        };
        *out = decoder_prune::kv_cache_entries(&profile, n_visual_original, n_text_total).fraction;
        Ok(())
    })
}
