//! C ABI over the `hlavqa` library.
//!
//! Every function returns an [`HlavqaStatus`]. On failure a message is kept
//! per thread and can be read with [`hlavqa_last_error`]. Models are opaque
//! handles created by [`hlavqa_model_load`] and released with
//! [`hlavqa_model_free`].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use hlavqa::attention::{ApplyMode, AttentionPrior, NormMode};
use hlavqa::data::{classify_question_type, QuestionType};
use hlavqa::model::{load_checkpoint, IntegrationConfig, Model, SampleInput, TextPriorSource};
use hlavqa::numcore::Tensor;
use hlavqa::saliency::{aggregate_to_grid, GridGeometry, SaliencyMap};
use hlavqa::train::vqa_accuracy;
use hlavqa::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HlavqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Config = 4,
    Data = 5,
    Format = 6,
    Numerical = 7,
    Io = 8,
    Internal = 9,
}

impl From<&Error> for HlavqaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => HlavqaStatus::Dimension,
            Error::Validation(_) => HlavqaStatus::InvalidArgument,
            Error::Config(_) => HlavqaStatus::Config,
            Error::Data(_) => HlavqaStatus::Data,
            Error::Format(_) | Error::Json(_) => HlavqaStatus::Format,
            Error::Numerical(_) => HlavqaStatus::Numerical,
            Error::Io(_) => HlavqaStatus::Io,
            Error::Graph(_) => HlavqaStatus::Internal,
        }
    }
}

/// Opaque trained model.
pub struct HlavqaModel {
    model: Model,
}

/// Sizes a caller needs to lay out forward inputs and outputs.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HlavqaModelInfo {
    pub d_x: usize,
    pub d_emb: usize,
    pub answers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub has_text_prior_net: bool,
}

/// Where priors enter. Bit `i` of a layer mask selects layer `i + 1`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct HlavqaIntegration {
    pub text_layers: u32,
    pub image_layers: u32,
    /// 0 per key, 1 per query.
    pub apply_mode: u32,
    /// 0 sum to one, 1 mean one.
    pub norm_mode: u32,
    /// 0 text saliency network, 1 caller-provided text prior.
    pub text_source: u32,
}

struct Fail(HlavqaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(HlavqaStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Fail>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> HlavqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HlavqaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HlavqaStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HlavqaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Fail {
    Fail(HlavqaStatus::InvalidArgument, msg)
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T: Copy>(p: *mut T, vals: &[T], what: &str) -> FfiResult<()> {
    if p.is_null() {
        return Err(null(what));
    }
    ptr::copy_nonoverlapping(vals.as_ptr(), p, vals.len());
    Ok(())
}

fn layers(mask: u32, depth: usize, what: &str) -> FfiResult<BTreeSet<usize>> {
    let set: BTreeSet<usize> = (0..32).filter(|b| mask >> b & 1 == 1).map(|b| b as usize + 1).collect();
    if let Some(&l) = set.iter().find(|&&l| l > depth) {
        return Err(Fail(HlavqaStatus::Config, format!("{what} layer {l} outside 1..={depth}")));
    }
    Ok(set)
}

fn norm_mode(code: u32) -> FfiResult<NormMode> {
    match code {
        0 => Ok(NormMode::SumToOne),
        1 => Ok(NormMode::MeanOne),
        c => Err(invalid(format!("norm mode {c}"))),
    }
}

fn integration(i: &HlavqaIntegration, model: &Model) -> FfiResult<IntegrationConfig> {
    Ok(IntegrationConfig {
        text_layers: layers(i.text_layers, model.cfg.encoder_layers, "text")?,
        image_layers: layers(i.image_layers, model.cfg.decoder_layers, "image")?,
        apply_mode: match i.apply_mode {
            0 => ApplyMode::PerKey,
            1 => ApplyMode::PerQuery,
            c => return Err(invalid(format!("apply mode {c}"))),
        },
        norm_mode: norm_mode(i.norm_mode)?,
        text_source: match i.text_source {
            0 => TextPriorSource::Tsm,
            1 => TextPriorSource::Provided,
            c => return Err(invalid(format!("text source {c}"))),
        },
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hlavqa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_model_load(path: *const c_char, out: *mut *mut HlavqaModel) -> HlavqaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let model = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(HlavqaModel { model }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hlavqa_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_model_free(model: *mut HlavqaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_model_info(model: *const HlavqaModel, out: *mut HlavqaModelInfo) -> HlavqaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let info = HlavqaModelInfo {
            d_x: m.cfg.d_x,
            d_emb: m.cfg.d_emb,
            answers: m.cfg.answer_vocab_size,
            encoder_layers: m.cfg.encoder_layers,
            decoder_layers: m.cfg.decoder_layers,
            has_text_prior_net: m.cfg.tsm.is_some(),
        };
        write_out(out, &[info], "out")
    })
}

/// Scores one question–image pair.
///
/// `question` holds `tokens × d_emb` embeddings and `mask` one byte per
/// token (nonzero = valid). `image` holds `cells × d_x` features. Priors are
/// raw nonnegative weights (`tokens` and `cells` long) or null when the
/// integration does not need them. `integ` may be null for no integration.
/// `scores` receives one sigmoid score per answer; `text_weights` and
/// `image_weights` may be null.
///
/// # Safety
/// Every non-null pointer must reference at least the stated number of
/// elements.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_model_forward(
    model: *const HlavqaModel,
    question: *const f64,
    mask: *const u8,
    tokens: usize,
    image: *const f64,
    cells: usize,
    text_prior: *const f64,
    image_prior: *const f64,
    integ: *const HlavqaIntegration,
    scores: *mut f64,
    text_weights: *mut f64,
    image_weights: *mut f64,
) -> HlavqaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if tokens == 0 || cells == 0 {
            return Err(invalid("tokens and cells must be positive".into()));
        }
        let integ = match integ.as_ref() {
            Some(i) => integration(i, m)?,
            None => IntegrationConfig::none(),
        };
        let q = slice(question, tokens * m.cfg.d_emb, "question")?;
        let mask: Vec<bool> = slice(mask, tokens, "mask")?.iter().map(|&b| b != 0).collect();
        let img = slice(image, cells * m.cfg.d_x, "image")?;
        let prior = |p: *const f64, len: usize, mask: Option<&[bool]>, what: &str| -> FfiResult<Option<AttentionPrior>> {
            if p.is_null() {
                return Ok(None);
            }
            let raw = slice(p, len, what)?;
            Ok(Some(AttentionPrior::from_raw(raw, mask, integ.norm_mode, ApplyMode::PerKey)?))
        };
        let sample = SampleInput {
            question: Tensor::new(vec![tokens, m.cfg.d_emb], q.to_vec())?,
            text_prior: prior(text_prior, tokens, Some(&mask), "text_prior")?,
            image_prior: prior(image_prior, cells, None, "image_prior")?,
            mask,
            image: Arc::new(Tensor::new(vec![cells, m.cfg.d_x], img.to_vec())?),
        };
        let p = m.predict(&sample, &integ)?;
        write_out(scores, &p.scores.0, "scores")?;
        if !text_weights.is_null() {
            write_out(text_weights, &p.text_weights, "text_weights")?;
        }
        if !image_weights.is_null() {
            write_out(image_weights, &p.image_weights, "image_weights")?;
        }
        Ok(())
    })
}

/// VQA accuracy of `predicted` against exactly ten annotator answers.
///
/// # Safety
/// `answers` must point to `count` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_vqa_accuracy(
    predicted: *const c_char,
    answers: *const *const c_char,
    count: usize,
    out: *mut f64,
) -> HlavqaStatus {
    guard(|| {
        let pred = c_str(predicted, "predicted")?;
        let list = slice(answers, count, "answers")?
            .iter()
            .map(|&a| c_str(a, "answer").map(String::from))
            .collect::<FfiResult<Vec<_>>>()?;
        let acc = vqa_accuracy(pred, &list)?;
        write_out(out, &[acc], "out")
    })
}

/// Pools a `height × width` saliency map onto a `rows × cols` grid and
/// normalises it (`norm_mode` 0 sum to one, 1 mean one). `out` receives
/// `rows·cols` weights in row-major order.
///
/// # Safety
/// `map` must hold `height·width` values and `out` room for `rows·cols`.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_aggregate_to_grid(
    map: *const f64,
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    norm_mode: u32,
    out: *mut f64,
) -> HlavqaStatus {
    guard(|| {
        let norm = self::norm_mode(norm_mode)?;
        let vals = slice(map, height * width, "map")?;
        let aspect = width as f64 / height.max(1) as f64;
        let map = SaliencyMap::new(height, width, vals.to_vec(), aspect)?;
        let p = aggregate_to_grid(&map, GridGeometry::new(rows, cols)?, norm)?;
        write_out(out, p.weights(), "out")
    })
}

/// Question-type bin index (0..12) of `question`.
///
/// # Safety
/// `question` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hlavqa_classify_question_type(question: *const c_char, out: *mut u32) -> HlavqaStatus {
    guard(|| {
        let q = c_str(question, "question")?;
        write_out(out, &[classify_question_type(q).index() as u32], "out")
    })
}

/// Static name of bin `index`, or null when out of range.
#[no_mangle]
pub extern "C" fn hlavqa_question_type_name(index: u32) -> *const c_char {
    static NAMES: std::sync::OnceLock<Vec<CString>> = std::sync::OnceLock::new();
    let names = NAMES.get_or_init(|| {
        QuestionType::ALL
            .iter()
            .map(|q| CString::new(q.as_str()).expect("ascii"))
            .collect()
    });
    names.get(index as usize).map_or(ptr::null(), |c| c.as_ptr())
}
