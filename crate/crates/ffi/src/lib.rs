//! C ABI over the editing model.
//!
//! Every function returns an [`SeStatus`]. On failure the message is kept in
//! a thread-local buffer readable through [`se_last_error`] until the next
//! call on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spatialedit::data::{generate, io::write_dataset, DataConfig};
use spatialedit::diagnostics::gradcheck_suite;
use spatialedit::flow::{edit_sample, SamplerConfig};
use spatialedit::model::Model;
use spatialedit::prompt::PromptTokens;
use spatialedit::rng::{stream, streams};
use spatialedit::train::{model_from_checkpoint, Checkpoint};
use spatialedit::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument or configuration: wrong sizes, bad prompt ids, a
    /// checkpoint without editing modules.
    InvalidArgument = 2,
    Io = 3,
    /// Checkpoint or dataset bytes failed validation.
    Corrupt = 4,
    /// The computation failed, e.g. a non-finite sampler state.
    Runtime = 5,
    Panic = 6,
}

/// Opaque handle to a loaded editing model.
pub struct SeModel {
    model: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SeModelInfo {
    pub image_size: u32,
    pub channels: u32,
    pub frames_max: u32,
    pub prompt_len: u32,
    pub vocab: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SeStatus {
    match e {
        Error::Io { .. } => SeStatus::Io,
        Error::CorruptManifest(_)
        | Error::CorruptCheckpoint(_)
        | Error::ChecksumMismatch { .. }
        | Error::TruncatedBlob { .. }
        | Error::IncompatibleShapes { .. }
        | Error::Json(_) => SeStatus::Corrupt,
        e if e.is_validation() => SeStatus::InvalidArgument,
        Error::ShapeMismatch { .. } => SeStatus::InvalidArgument,
        _ => SeStatus::Runtime,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            SeStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            SeStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn se_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn se_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an editing checkpoint. On success `*out` owns a handle that must be
/// released with [`se_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn se_model_load(path: *const c_char, out: *mut *mut SeModel) -> SeStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = std::ptr::null_mut();
        let path = path_arg(path, "path")?;
        let ck = Checkpoint::load(&path)?;
        if ck.mode.is_none() {
            return Err(Fail::Arg(format!(
                "{} holds a bare backbone, not an editing model",
                path.display()
            )));
        }
        let model = model_from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(SeModel { model }));
        Ok(())
    })
}

/// Releases a handle from [`se_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`se_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn se_model_free(model: *mut SeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn se_model_info(model: *const SeModel, info: *mut SeModelInfo) -> SeStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let info = info.as_mut().ok_or(Fail::Null("info"))?;
        let c = m.model.cfg();
        *info = SeModelInfo {
            image_size: c.image_size as u32,
            channels: c.channels as u32,
            frames_max: c.frames_max as u32,
            prompt_len: c.prompt_len as u32,
            vocab: c.vocab as u32,
        };
        Ok(())
    })
}

/// Edits one clip. `source` and `out` hold `frames × channels × size × size`
/// floats in `[0, 1]`, frame-major then channel-major. Prompts are token ids
/// with no padding. The result depends only on the inputs, `steps` and
/// `seed`.
///
/// # Safety
/// All pointers must be valid for the stated lengths; `out` must not alias
/// `source`.
#[no_mangle]
pub unsafe extern "C" fn se_model_edit(
    model: *const SeModel,
    source: *const f32,
    frames: usize,
    source_prompt: *const u16,
    source_prompt_len: usize,
    edit_prompt: *const u16,
    edit_prompt_len: usize,
    steps: u32,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> SeStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let c = m.model.cfg();
        let n = frames * c.channels * c.image_size * c.image_size;
        if frames == 0 {
            return Err(Fail::Arg("frames must be at least 1".into()));
        }
        if out_len != n {
            return Err(Fail::Arg(format!("out_len is {out_len}, expected {n}")));
        }
        let src = slice_arg(source, n, "source")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let sp = PromptTokens::new(slice_arg(source_prompt, source_prompt_len, "source_prompt")?)?;
        let ep = PromptTokens::new(slice_arg(edit_prompt, edit_prompt_len, "edit_prompt")?)?;
        let sampler = SamplerConfig { steps: steps as usize };
        sampler.validate()?;
        let x = Tensor::new([1, frames, c.channels, c.image_size, c.image_size], src.to_vec())?;
        let y = edit_sample(
            &m.model,
            &x,
            &[sp],
            &[ep],
            &sampler,
            &mut stream(seed, streams::SAMPLER),
        )?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(y.data());
        Ok(())
    })
}

/// Generates the synthetic corpus for `seed` and writes it to `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn se_dataset_generate(
    dir: *const c_char,
    seed: u64,
    train_pairs: usize,
    test_pairs: usize,
    clips: usize,
    heldout_clips: usize,
) -> SeStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let cfg = DataConfig {
            seed,
            train_pairs,
            test_pairs,
            clips,
            heldout_clips,
            ..DataConfig::default()
        };
        let (ds, _, _) = generate(&cfg)?;
        write_dataset(&dir, &ds)?;
        Ok(())
    })
}

/// Runs the finite-difference gradient suite. `*passed` is set to 1 when
/// every check is within tolerance.
///
/// # Safety
/// `passed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn se_gradcheck(seed: u64, passed: *mut u8) -> SeStatus {
    guard(|| {
        let passed = passed.as_mut().ok_or(Fail::Null("passed"))?;
        *passed = gradcheck_suite(seed)?.all_passed() as u8;
        Ok(())
    })
}
