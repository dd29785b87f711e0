//! C ABI over the simulstream core.
//!
//! Handles are opaque pointers created by `*_load`/`*_new` and released by the
//! matching `*_free`. Every fallible call returns an [`SsStatus`]; on failure
//! `ss_last_error_message` describes the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use simulstream::codec::{CodebookStack, Latents};
use simulstream::inference::{SamplingConfig, Session, SessionState};
use simulstream::metrics::{laal, sentence_bleu, tokenize, LatencyInputs};
use simulstream::model::RqTransformer;
use simulstream::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    SessionFinished = 6,
    Panic = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsSessionState {
    Running = 0,
    SourceEnded = 1,
    Finished = 2,
}

pub struct SsModel {
    inner: Arc<RqTransformer>,
}

pub struct SsSession {
    inner: Session,
    levels: usize,
}

pub struct SsCodec {
    inner: CodebookStack,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SsStatus {
    match e {
        Error::Io(_) => SsStatus::Io,
        Error::Format(_) | Error::Json(_) => SsStatus::Format,
        Error::Config { .. } => SsStatus::Config,
        Error::SessionFinished => SsStatus::SessionFinished,
        Error::LengthMismatch { .. } | Error::DimensionMismatch { .. } | Error::Empty(_) => SsStatus::InvalidArgument,
        _ => SsStatus::Internal,
    }
}

struct Fail(SsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside simulstream".into());
            SsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(SsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(SsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn ss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load an `RQT1` checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = RqTransformer::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(SsModel { inner: Arc::new(model) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `ss_model_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// RVQ levels per audio stream, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_model_levels(model: *const SsModel) -> u32 {
    model.as_ref().map_or(0, |m| m.inner.config().levels as u32)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_model_num_parameters(model: *const SsModel) -> u64 {
    model.as_ref().map_or(0, |m| m.inner.num_parameters() as u64)
}

/// Start a streaming session. `greedy` selects argmax decoding without
/// guidance; otherwise the default sampling settings are used with `seed`.
/// The session keeps its own reference to the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_session_new(model: *const SsModel, greedy: bool, seed: u64, out: *mut *mut SsSession) -> SsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = if greedy { SamplingConfig::greedy() } else { SamplingConfig::default() };
        let config = SamplingConfig { seed, ..config };
        let levels = m.inner.config().levels;
        let inner = Session::new(Arc::clone(&m.inner), config, 0)?;
        *out = Box::into_raw(Box::new(SsSession { inner, levels }));
        Ok(())
    })
}

/// Feed one source frame (`levels` tokens) and receive one output frame:
/// a text token and `levels` target audio tokens.
///
/// # Safety
/// `source` must hold `levels` values and `out_audio` room for `levels` values.
#[no_mangle]
pub unsafe extern "C" fn ss_session_step(
    session: *mut SsSession,
    source: *const u16,
    levels: usize,
    out_text: *mut u16,
    out_audio: *mut u16,
) -> SsStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        if source.is_null() || out_text.is_null() || out_audio.is_null() {
            return Err(null("buffer"));
        }
        if levels != s.levels {
            return Err(Fail(SsStatus::InvalidArgument, format!("expected {} levels, got {levels}", s.levels)));
        }
        let frame = std::slice::from_raw_parts(source, levels);
        let step = s.inner.step(frame)?;
        *out_text = step.text;
        std::slice::from_raw_parts_mut(out_audio, levels).copy_from_slice(&step.audio);
        Ok(())
    })
}

/// Signal that the live source has ended; later steps should feed input-EOS frames.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_session_end_source(session: *mut SsSession) -> SsStatus {
    guard(|| {
        session.as_mut().ok_or_else(|| null("session"))?.inner.end_source();
        Ok(())
    })
}

/// Token to feed as every source level once the source has ended.
///
/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_session_input_eos(session: *const SsSession) -> u16 {
    session.as_ref().map_or(0, |s| s.inner.input_eos_frame()[0])
}

/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_session_state(session: *const SsSession, out: *mut SsSessionState) -> SsStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = match s.inner.state() {
            SessionState::Running => SsSessionState::Running,
            SessionState::SourceEnded => SsSessionState::SourceEnded,
            SessionState::Finished => SsSessionState::Finished,
        };
        Ok(())
    })
}

/// # Safety
/// `session` must come from `ss_session_new` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_session_free(session: *mut SsSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Load `RVQ1` codebooks.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_codec_load(path: *const c_char, out: *mut *mut SsCodec) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(path_arg(path)?).map_err(Error::from)?);
        let inner = CodebookStack::read_from(&mut f)?;
        *out = Box::into_raw(Box::new(SsCodec { inner }));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from `ss_codec_load` and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_codec_free(codec: *mut SsCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// # Safety
/// `codec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_codec_levels(codec: *const SsCodec) -> u32 {
    codec.as_ref().map_or(0, |c| c.inner.num_levels() as u32)
}

/// Quantize `frames × dim` latents (row-major) into `frames × levels` 1-based tokens.
///
/// # Safety
/// `latents` must hold `frames·dim` values and `out_tokens` room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn ss_codec_encode(
    codec: *const SsCodec,
    latents: *const f32,
    frames: usize,
    dim: usize,
    out_tokens: *mut u16,
    out_len: usize,
) -> SsStatus {
    guard(|| {
        let c = codec.as_ref().ok_or_else(|| null("codec"))?;
        if latents.is_null() || out_tokens.is_null() {
            return Err(null("buffer"));
        }
        let need = frames * c.inner.num_levels();
        if out_len != need {
            return Err(Fail(SsStatus::InvalidArgument, format!("out_len {out_len}, need {need}")));
        }
        let data = std::slice::from_raw_parts(latents, frames * dim).to_vec();
        let grid = c.inner.encode(&Latents::new(frames, dim, data)?)?;
        std::slice::from_raw_parts_mut(out_tokens, need).copy_from_slice(&grid.tokens);
        Ok(())
    })
}

/// Length-adaptive average lagging of `n` non-decreasing emission times.
///
/// # Safety
/// `emit_times` must hold `n` values and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_laal(emit_times: *const f64, n: usize, source_duration: f64, n_ref: usize, out: *mut f64) -> SsStatus {
    guard(|| {
        if out.is_null() || (emit_times.is_null() && n > 0) {
            return Err(null("buffer"));
        }
        let d = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(emit_times, n).to_vec() };
        *out = laal(&LatencyInputs { emit_times: d, source_duration, n_ref })?;
        Ok(())
    })
}

/// Sentence BLEU (0–100) of two strings after normalization and whitespace tokenization.
///
/// # Safety
/// Both strings must be NUL-terminated UTF-8 and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_bleu(hypothesis: *const c_char, reference: *const c_char, out: *mut f64) -> SsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let h = tokenize(str_arg(hypothesis, "hypothesis")?);
        let r = tokenize(str_arg(reference, "reference")?);
        *out = sentence_bleu(&h, &r)?;
        Ok(())
    })
}
