//! C ABI over `esc-core`.
//!
//! Models and vocabularies are opaque handles created by `*_load` and released
//! by `*_free`. Every fallible call returns an [`EscStatus`]; on failure the
//! message is available from [`esc_last_error_message`] on the same thread.
//! Strings returned through `char **out` are owned by the caller and must be
//! released with [`esc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use esc_core::checkpoint;
use esc_core::compression::CompressionConfig;
use esc_core::evaluation::{bleu, rouge, Rouge};
use esc_core::experiment::{compress_lines, translate_lines};
use esc_core::model::Model;
use esc_core::tokenizer::Vocabulary;
use esc_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidArgument = 4,
    Model = 5,
    Panic = 6,
}

/// A loaded checkpoint.
pub struct EscModel(Model);

/// A loaded vocabulary.
pub struct EscVocab(Vocabulary);

/// Beam settings for [`esc_compress`] and [`esc_translate`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct EscDecodeOptions {
    pub alpha: f64,
    pub beta: f64,
    /// Length ratio; ignored by translation.
    pub gamma: f64,
    pub beam: usize,
    /// Translation length limit beyond the source length.
    pub max_extra_tokens: usize,
}

pub const ESC_ROUGE_1: u32 = 1;
pub const ESC_ROUGE_2: u32 = 2;
pub const ESC_ROUGE_L: u32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(EscStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => EscStatus::Io,
            Error::InvalidArgument(_) | Error::Empty(_) | Error::IndexOutOfRange { .. } | Error::Format { .. } => {
                EscStatus::InvalidArgument
            }
            Error::Shape { .. } | Error::NonScalarLoss(_) | Error::Variant { .. } | Error::BeamCollapse => EscStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EscStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside esc-ffi");
            EscStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(EscStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EscStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|_| Failure(EscStatus::InvalidArgument, "output contains NUL".into()))?;
    out.write(c.into_raw());
    Ok(())
}

fn split_lines(s: &str) -> Vec<String> {
    s.lines().map(str::to_string).collect()
}

fn decode_config(o: &EscDecodeOptions) -> Result<CompressionConfig, Failure> {
    let cfg = CompressionConfig {
        alpha: o.alpha,
        beta: o.beta,
        gamma: o.gamma,
        beam: o.beam,
        max_extra_tokens: o.max_extra_tokens,
        ..CompressionConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Library defaults: α 0.5, β 0.2, γ 0.6, beam 5, 10 extra tokens.
#[no_mangle]
pub extern "C" fn esc_decode_options_default() -> EscDecodeOptions {
    let d = CompressionConfig::default();
    EscDecodeOptions {
        alpha: d.alpha,
        beta: d.beta,
        gamma: d.gamma,
        beam: d.beam,
        max_extra_tokens: d.max_extra_tokens,
    }
}

/// Message of the last failed call on this thread, or an empty string. Valid
/// until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn esc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esc_model_load(path: *const c_char, out: *mut *mut EscModel) -> EscStatus {
    guard(|| {
        let path = text(path, "path")?;
        let model = checkpoint::load(Path::new(path))?;
        put(out, Box::into_raw(Box::new(EscModel(model))))
    })
}

/// # Safety
/// `model` must come from [`esc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esc_model_free(model: *mut EscModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esc_model_param_count(model: *const EscModel, out: *mut usize) -> EscStatus {
    guard(|| put(out, handle(model, "model")?.0.param_count()))
}

/// Loads `vocab_path`, plus BPE merges when `merges_path` is non-null.
///
/// # Safety
/// Paths must be NUL-terminated strings (`merges_path` may be null); `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn esc_vocab_load(
    vocab_path: *const c_char,
    merges_path: *const c_char,
    out: *mut *mut EscVocab,
) -> EscStatus {
    guard(|| {
        let vocab = text(vocab_path, "vocab_path")?;
        let merges = opt_text(merges_path, "merges_path")?;
        let v = Vocabulary::load(Path::new(vocab), merges.map(Path::new))?;
        put(out, Box::into_raw(Box::new(EscVocab(v))))
    })
}

/// # Safety
/// `vocab` must come from [`esc_vocab_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esc_vocab_free(vocab: *mut EscVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Compresses one sentence.
///
/// # Safety
/// Handles must be live, `sentence` NUL-terminated, `options` readable and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn esc_compress(
    model: *const EscModel,
    vocab: *const EscVocab,
    sentence: *const c_char,
    options: *const EscDecodeOptions,
    out: *mut *mut c_char,
) -> EscStatus {
    guard(|| {
        let (m, v) = (handle(model, "model")?, handle(vocab, "vocab")?);
        let cfg = decode_config(handle(options, "options")?)?;
        let line = text(sentence, "sentence")?.to_string();
        let mut res = compress_lines(&m.0, &v.0, &[line], &cfg)?;
        put_string(out, res.pop().unwrap_or_default())
    })
}

/// Translates one sentence; `compressed` may be null for the baseline.
///
/// # Safety
/// As for [`esc_compress`]; `compressed` may be null.
#[no_mangle]
pub unsafe extern "C" fn esc_translate(
    model: *const EscModel,
    vocab: *const EscVocab,
    sentence: *const c_char,
    compressed: *const c_char,
    options: *const EscDecodeOptions,
    out: *mut *mut c_char,
) -> EscStatus {
    guard(|| {
        let (m, v) = (handle(model, "model")?, handle(vocab, "vocab")?);
        let cfg = CompressionConfig {
            gamma: 1.0,
            ..decode_config(handle(options, "options")?)?
        };
        let src = [text(sentence, "sentence")?.to_string()];
        let cmp = opt_text(compressed, "compressed")?.map(|c| [c.to_string()]);
        let mut res = translate_lines(&m.0, &v.0, &src, cmp.as_ref().map(|c| c.as_slice()), &cfg)?;
        put_string(out, res.pop().unwrap_or_default())
    })
}

/// Corpus BLEU-4 (0..100) of newline-separated hypotheses against
/// newline-separated references.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esc_bleu(
    hypotheses: *const c_char,
    references: *const c_char,
    smooth: c_int,
    out: *mut f64,
) -> EscStatus {
    guard(|| {
        let h = split_lines(text(hypotheses, "hypotheses")?);
        let r = split_lines(text(references, "references")?);
        put(out, bleu(&h, &r, smooth != 0)?.score)
    })
}

/// Sentence ROUGE F1; `variant` is one of `ESC_ROUGE_1`, `ESC_ROUGE_2`,
/// `ESC_ROUGE_L`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esc_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    variant: u32,
    out: *mut f64,
) -> EscStatus {
    guard(|| {
        let v = match variant {
            ESC_ROUGE_1 => Rouge::R1,
            ESC_ROUGE_2 => Rouge::R2,
            ESC_ROUGE_L => Rouge::RL,
            other => return Err(Failure(EscStatus::InvalidArgument, format!("unknown ROUGE variant {other}"))),
        };
        let report = rouge(text(candidate, "candidate")?, text(reference, "reference")?, v)?;
        put(out, report.f1)
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
