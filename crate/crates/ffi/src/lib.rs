//! C ABI over the xrmbt pipeline.
//!
//! Every function returns an [`XrmbtStatus`]; results go through out
//! pointers. Handles are opaque and must be released with their `_free`
//! function. [`xrmbt_last_error`] describes the most recent failure on the
//! calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xrmbt::error::Error;
use xrmbt::io::{load_checkpoint, load_sequence};
use xrmbt::kinematics::{BodyShape, Skeleton};
use xrmbt::metrics::mpjpe;
use xrmbt::sensor::sequence::{sequence_rng, SequenceSample};
use xrmbt::synthesis::{OracleConfig, SynthInput, Synthesizer};
use xrmbt::trainer::{Mode, Model};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XrmbtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Io = 5,
    Format = 6,
    SkeletonMismatch = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A trained model bound to the built-in 22-joint skeleton.
pub struct XrmbtModel {
    model: Model,
    skel: Skeleton,
    #[allow(dead_code)]
    shape: BodyShape,
}

/// A loaded sequence.
pub struct XrmbtSequence {
    seq: SequenceSample,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> XrmbtStatus {
    match e {
        Error::Config(_) => XrmbtStatus::Config,
        Error::Io { .. } => XrmbtStatus::Io,
        Error::Format { .. } | Error::Checksum { .. } | Error::SchemaVersion { .. } => XrmbtStatus::Format,
        Error::SkeletonMismatch(_) => XrmbtStatus::SkeletonMismatch,
        e if e.is_numerical() => XrmbtStatus::Numerical,
        _ => XrmbtStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), XrmbtStatus>) -> XrmbtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            XrmbtStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            XrmbtStatus::Panic
        }
    }
}

fn fail(e: Error) -> XrmbtStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> XrmbtStatus {
    set_error(&format!("{what} is null"));
    XrmbtStatus::NullPointer
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, XrmbtStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| {
            set_error("path is not UTF-8");
            XrmbtStatus::InvalidArgument
        })
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, XrmbtStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, XrmbtStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xrmbt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn xrmbt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn xrmbt_sequence_load(path: *const c_char, out: *mut *mut XrmbtSequence) -> XrmbtStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let seq = load_sequence(&path_arg(path)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(XrmbtSequence { seq }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xrmbt_sequence_free(seq: *mut XrmbtSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

#[no_mangle]
pub unsafe extern "C" fn xrmbt_sequence_frames(seq: *const XrmbtSequence, out: *mut usize) -> XrmbtStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(seq, "sequence")?.seq.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xrmbt_sequence_points(seq: *const XrmbtSequence, out: *mut usize) -> XrmbtStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(seq, "sequence")?.seq.num_points();
        Ok(())
    })
}

/// Copies frame `frame`'s sensor-frame points, `3 * points` floats, into `buf`.
#[no_mangle]
pub unsafe extern "C" fn xrmbt_sequence_cloud(
    seq: *const XrmbtSequence,
    frame: usize,
    buf: *mut f32,
    len: usize,
) -> XrmbtStatus {
    guard(|| {
        let s = &in_ref(seq, "sequence")?.seq;
        let cloud = s.clouds.get(frame).ok_or_else(|| {
            set_error(&format!("frame {frame} of {}", s.len()));
            XrmbtStatus::InvalidArgument
        })?;
        let need = cloud.points.len() * 3;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len < need {
            set_error(&format!("buffer holds {len} floats, need {need}"));
            return Err(XrmbtStatus::BufferTooSmall);
        }
        let out = std::slice::from_raw_parts_mut(buf, need);
        for (o, v) in out.iter_mut().zip(cloud.points.iter().flatten()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Loads a checkpoint trained on the built-in skeleton.
#[no_mangle]
pub unsafe extern "C" fn xrmbt_model_load(path: *const c_char, out: *mut *mut XrmbtModel) -> XrmbtStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let ck = load_checkpoint(&path_arg(path)?).map_err(fail)?;
        let (skel, shape) = Skeleton::smpl22();
        if ck.skeleton != skel.fingerprint() {
            return Err(fail(Error::SkeletonMismatch("checkpoint skeleton differs from the built-in one".into())));
        }
        *out = Box::into_raw(Box::new(XrmbtModel {
            model: ck.model,
            skel,
            shape,
        }));
        Ok(())
    })
}

/// A parameter-free model that returns the synthesis stage unchanged.
#[no_mangle]
pub unsafe extern "C" fn xrmbt_model_synthesis_only(out: *mut *mut XrmbtModel) -> XrmbtStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let (skel, shape) = Skeleton::smpl22();
        let model = Model::init(Mode::SynthesisOnly, skel.num_joints(), 0, &mut sequence_rng(0, 0));
        *out = Box::into_raw(Box::new(XrmbtModel { model, skel, shape }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xrmbt_model_free(model: *mut XrmbtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn xrmbt_model_joints(model: *const XrmbtModel, out: *mut usize) -> XrmbtStatus {
    guard(|| {
        *out_ref(out, "out")? = in_ref(model, "model")?.model.joints;
        Ok(())
    })
}

/// Predicted world joint positions in meters, `frames * joints * 3` floats
/// laid out frame-major. Uses the sequence's stored synthesis when present,
/// otherwise the noisy oracle seeded by `seed`.
#[no_mangle]
pub unsafe extern "C" fn xrmbt_predict_positions(
    model: *const XrmbtModel,
    seq: *const XrmbtSequence,
    seed: u64,
    buf: *mut f32,
    len: usize,
) -> XrmbtStatus {
    guard(|| {
        let m = in_ref(model, "model")?;
        let s = &in_ref(seq, "sequence")?.seq;
        let need = s.len() * m.skel.num_joints() * 3;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len < need {
            set_error(&format!("buffer holds {len} floats, need {need}"));
            return Err(XrmbtStatus::BufferTooSmall);
        }
        let synth = if s.synth.is_some() {
            Synthesizer::Stored
        } else {
            Synthesizer::Oracle(OracleConfig::default())
        };
        let y = synth
            .synthesize(&m.skel, SynthInput::of(s), &mut sequence_rng(seed, 0))
            .map_err(fail)?;
        let pred = m.model.predict(&m.skel, s, &y).map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(buf, need);
        let flat = pred.positions.iter().flatten().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]);
        for (o, v) in out.iter_mut().zip(flat) {
            *o = v;
        }
        Ok(())
    })
}

/// Mean per-joint position error in centimeters between two
/// `frames * joints * 3` position buffers.
#[no_mangle]
pub unsafe extern "C" fn xrmbt_mpjpe(
    pred: *const f32,
    gt: *const f32,
    frames: usize,
    joints: usize,
    out: *mut f64,
) -> XrmbtStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() {
            return Err(null("position buffer"));
        }
        let out = out_ref(out, "out")?;
        if frames == 0 || joints == 0 {
            set_error("frames and joints must be positive");
            return Err(XrmbtStatus::InvalidArgument);
        }
        let n = frames * joints * 3;
        let to_vec = |p: *const f32| {
            let s = std::slice::from_raw_parts(p, n);
            s.chunks_exact(joints * 3)
                .map(|f| {
                    f.chunks_exact(3)
                        .map(|v| nalgebra::Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64))
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        let subset: Vec<usize> = (0..joints).collect();
        *out = mpjpe(&to_vec(pred), &to_vec(gt), &subset).map_err(fail)?;
        Ok(())
    })
}
