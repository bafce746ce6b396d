//! C ABI for hlat-core.
//!
//! Models are opaque handles created by `*_load` and released by `*_free`.
//! Every fallible function returns an [`HlatStatus`]; on failure the message
//! is available from [`hlat_last_error_message`] on the same thread.
//!
//! Feature grids are passed as `channels × side²` doubles, channel-major:
//! value `c * side² + j` is channel `c` of cell `j`, cells in row-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hlat_core::answerer::{answer, VqaParams};
use hlat_core::attention::HanParams;
use hlat_core::encoders::FeatureGrid;
use hlat_core::metrics::{self, RankFormula};
use hlat_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HlatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Wrong lengths, shapes or token ids.
    Contract = 3,
    /// A file did not match its declared layout.
    Format = 4,
    Io = 5,
    Config = 6,
    /// Rank correlation undefined because a map is constant.
    UndefinedCorrelation = 7,
    /// The output buffer is too small; nothing was written.
    BufferTooSmall = 8,
    Panic = 99,
}

/// Trained attention network.
pub struct HlatHan {
    inner: HanParams,
}

/// Trained answerer.
pub struct HlatVqa {
    inner: VqaParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HlatStatus {
    match e {
        Error::Contract(_) => HlatStatus::Contract,
        Error::Format { .. } | Error::Json(_) => HlatStatus::Format,
        Error::Io { .. } => HlatStatus::Io,
        Error::Config(_) => HlatStatus::Config,
        Error::UndefinedCorrelation(_) => HlatStatus::UndefinedCorrelation,
    }
}

struct Fail(HlatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Run `f`, turning errors and panics into a status plus a thread-local message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HlatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            HlatStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            HlatStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HlatStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(HlatStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Fail> {
    if dst.len() < src.len() {
        return Err(Fail(
            HlatStatus::BufferTooSmall,
            format!("output holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

unsafe fn grid(channels: usize, side: usize, features: *const f64, len: usize) -> Result<FeatureGrid, Fail> {
    let data = slice(features, len, "features")?;
    Ok(FeatureGrid::new(channels, side, data.to_vec())?)
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hlat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hlat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load an attention-network checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hlat_han_load(path: *const c_char, out: *mut *mut HlatHan) -> HlatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (inner, _) = HanParams::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(HlatHan { inner }));
        Ok(())
    })
}

/// Grid and vocabulary sizes the network expects. Any output pointer may be null.
///
/// # Safety
/// `han` must come from [`hlat_han_load`].
#[no_mangle]
pub unsafe extern "C" fn hlat_han_dims(
    han: *const HlatHan,
    channels: *mut usize,
    side: *mut usize,
    vocab: *mut usize,
) -> HlatStatus {
    guard(|| {
        let c = &han.as_ref().ok_or_else(|| null("han"))?.inner.config;
        for (p, v) in [(channels, c.channels), (side, c.side), (vocab, c.vocab)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Predict an attention map (`side²` values on the simplex) into `out_map`.
///
/// # Safety
/// Pointers must reference at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hlat_han_predict(
    han: *const HlatHan,
    features: *const f64,
    features_len: usize,
    tokens: *const usize,
    tokens_len: usize,
    out_map: *mut f64,
    out_len: usize,
) -> HlatStatus {
    guard(|| {
        let han = &han.as_ref().ok_or_else(|| null("han"))?.inner;
        let f = grid(han.config.channels, han.config.side, features, features_len)?;
        let tokens = slice(tokens, tokens_len, "tokens")?;
        let map = han.predict(&f, tokens)?;
        copy_out(map.values(), slice_mut(out_map, out_len, "out_map")?)
    })
}

/// # Safety
/// `han` must come from [`hlat_han_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hlat_han_free(han: *mut HlatHan) {
    if !han.is_null() {
        drop(Box::from_raw(han));
    }
}

/// Load an answerer checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hlat_vqa_load(path: *const c_char, out: *mut *mut HlatVqa) -> HlatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (inner, _) = VqaParams::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(HlatVqa { inner }));
        Ok(())
    })
}

/// Grid, vocabulary and answer-set sizes; any output pointer may be null.
/// `supervised` is set to 1 for a model trained with attention supervision.
///
/// # Safety
/// `vqa` must come from [`hlat_vqa_load`].
#[no_mangle]
pub unsafe extern "C" fn hlat_vqa_dims(
    vqa: *const HlatVqa,
    channels: *mut usize,
    side: *mut usize,
    vocab: *mut usize,
    answers: *mut usize,
    supervised: *mut usize,
) -> HlatStatus {
    guard(|| {
        let c = &vqa.as_ref().ok_or_else(|| null("vqa"))?.inner.config;
        let sup = usize::from(c.mode == hlat_core::answerer::VqaMode::Supervised);
        for (p, v) in [
            (channels, c.channels),
            (side, c.side),
            (vocab, c.vocab),
            (answers, c.answers),
            (supervised, sup),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Answer distribution into `out_dist` and the chosen answer index into `*out_answer`
/// (lowest index among ties). `out_answer` may be null.
///
/// # Safety
/// Pointers must reference at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hlat_vqa_predict(
    vqa: *const HlatVqa,
    features: *const f64,
    features_len: usize,
    tokens: *const usize,
    tokens_len: usize,
    out_dist: *mut f64,
    out_len: usize,
    out_answer: *mut usize,
) -> HlatStatus {
    guard(|| {
        let vqa = &vqa.as_ref().ok_or_else(|| null("vqa"))?.inner;
        let f = grid(vqa.config.channels, vqa.config.side, features, features_len)?;
        let tokens = slice(tokens, tokens_len, "tokens")?;
        let dist = vqa.predict(&f, tokens)?;
        copy_out(&dist, slice_mut(out_dist, out_len, "out_dist")?)?;
        if !out_answer.is_null() {
            *out_answer = answer(&dist);
        }
        Ok(())
    })
}

/// The answerer's attention map (glimpse softmaxes averaged) into `out_map`.
///
/// # Safety
/// Pointers must reference at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hlat_vqa_attention(
    vqa: *const HlatVqa,
    features: *const f64,
    features_len: usize,
    tokens: *const usize,
    tokens_len: usize,
    out_map: *mut f64,
    out_len: usize,
) -> HlatStatus {
    guard(|| {
        let vqa = &vqa.as_ref().ok_or_else(|| null("vqa"))?.inner;
        let f = grid(vqa.config.channels, vqa.config.side, features, features_len)?;
        let tokens = slice(tokens, tokens_len, "tokens")?;
        let map = vqa.attention_map(&f, tokens)?;
        copy_out(map.values(), slice_mut(out_map, out_len, "out_map")?)
    })
}

/// # Safety
/// `vqa` must come from [`hlat_vqa_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hlat_vqa_free(vqa: *mut HlatVqa) {
    if !vqa.is_null() {
        drop(Box::from_raw(vqa));
    }
}

fn formula(literal_grid: bool) -> RankFormula {
    if literal_grid {
        RankFormula::LiteralGrid
    } else {
        RankFormula::Standard
    }
}

/// Rank correlation of two maps of length `n`. A nonzero `literal_grid` uses
/// the `l² − l` denominator with `l = √n`.
///
/// # Safety
/// `a` and `b` must each hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hlat_spearman(
    a: *const f64,
    b: *const f64,
    n: usize,
    literal_grid: bool,
    out: *mut f64,
) -> HlatStatus {
    guard(|| {
        let (a, b) = (slice(a, n, "a")?, slice(b, n, "b")?);
        let r = metrics::spearman_with(a, b, formula(literal_grid))?;
        *out.as_mut().ok_or_else(|| null("out"))? = r;
        Ok(())
    })
}

/// Mean rank correlation of `pred` against `annotators` maps stored back to back
/// (`annotators_count × n` doubles).
///
/// # Safety
/// Pointers must reference at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hlat_mean_rank_correlation(
    pred: *const f64,
    n: usize,
    annotators: *const f64,
    annotators_count: usize,
    literal_grid: bool,
    out: *mut f64,
) -> HlatStatus {
    guard(|| {
        let pred = slice(pred, n, "pred")?;
        let flat = slice(annotators, n * annotators_count, "annotators")?;
        let maps: Vec<Vec<f64>> = if n == 0 {
            vec![Vec::new(); annotators_count]
        } else {
            flat.chunks(n).map(<[f64]>::to_vec).collect()
        };
        let r = metrics::mean_rank_correlation_with(pred, &maps, formula(literal_grid))?;
        *out.as_mut().ok_or_else(|| null("out"))? = r;
        Ok(())
    })
}

/// `min(#votes matching pred / 3, 1)` after trimming and lowercasing.
///
/// # Safety
/// `pred` and each of the `votes_count` entries of `votes` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hlat_consensus_accuracy(
    pred: *const c_char,
    votes: *const *const c_char,
    votes_count: usize,
    out: *mut f64,
) -> HlatStatus {
    guard(|| {
        let pred = str_arg(pred, "pred")?;
        let votes: Vec<String> = slice(votes, votes_count, "votes")?
            .iter()
            .map(|&v| str_arg(v, "vote").map(str::to_string))
            .collect::<Result<_, _>>()?;
        let r = metrics::consensus_accuracy(pred, &votes)?;
        *out.as_mut().ok_or_else(|| null("out"))? = r;
        Ok(())
    })
}
