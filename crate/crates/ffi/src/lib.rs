//! C ABI over the `nextshot` library.
//!
//! Every entry point returns an [`NsStatus`]; on failure the message is kept
//! per thread and can be read with [`ns_last_error_message`]. Objects cross
//! the boundary as opaque handles that the caller releases with the matching
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nextshot::caci::{caci_plan, ConditioningMode};
use nextshot::diffusion::sample_next_shot;
use nextshot::ham::{build_ham, ham_block_matrix};
use nextshot::layout::{build_layout, SegmentKind, SegmentLayout};
use nextshot::metrics::fid;
use nextshot::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelWeights};
use nextshot::tensor::Rng;
use nextshot::world::{make_pair, EditPattern, ShotPair};
use nextshot::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Model size preset.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsPreset {
    Tiny = 0,
    Desk = 1,
}

/// Per-segment timestep plan used while sampling.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsConditioning {
    Caci = 0,
    SyncCond = 1,
    CaciRelDiffusion = 2,
}

/// Which image of a shot pair to read.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NsShot {
    Cond = 0,
    Tgt = 1,
}

/// Opaque model weights.
pub struct NsModel(ModelWeights);

/// Opaque procedural shot pair.
pub struct NsPair(ShotPair);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(NsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => NsStatus::Shape,
            Error::Io(_) => NsStatus::Io,
            Error::Format { .. } | Error::Json(_) => NsStatus::Format,
            Error::Matrix { .. } | Error::NonFinite(_) => NsStatus::Numeric,
            _ => NsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: NsStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(NsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(NsStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| fail(NsStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(NsStatus::NullPointer, "output pointer is null"));
    }
    out.write(value);
    Ok(())
}

unsafe fn fill<T: Copy>(buf: *mut T, len: usize, src: &[T]) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(fail(NsStatus::NullPointer, "buffer is null"));
    }
    if len < src.len() {
        return Err(fail(NsStatus::BufferTooSmall, format!("buffer holds {len}, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, or 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ns_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Freshly initialized model (frozen random backbone, zero LoRA and
/// modulation weights).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ns_model_new(preset: NsPreset, seed: u64, out: *mut *mut NsModel) -> NsStatus {
    guard(|| {
        let config = match preset {
            NsPreset::Tiny => ModelConfig::tiny(),
            NsPreset::Desk => ModelConfig::desk(),
        };
        let w = ModelWeights::init(&config, seed)?;
        write_out(out, Box::into_raw(Box::new(NsModel(w))))
    })
}

/// Loads a checkpoint written by `ns_model_save` or the command-line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_model_load(path: *const c_char, out: *mut *mut NsModel) -> NsStatus {
    guard(|| {
        let w = load_checkpoint(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(NsModel(w))))
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ns_model_save(model: *const NsModel, path: *const c_char) -> NsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        save_checkpoint(path_arg(path)?, &m.0)?;
        Ok(())
    })
}

/// Side length in pixels of the images the model works on.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_model_image_size(model: *const NsModel, out: *mut usize) -> NsStatus {
    guard(|| write_out(out, deref(model, "model")?.0.config.image_size))
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_model_free(model: *mut NsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn pattern(code: u32) -> Result<EditPattern, Failure> {
    EditPattern::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| fail(NsStatus::InvalidArgument, format!("edit pattern {code} out of range 0..5")))
}

/// Renders one procedural pair. `pattern` indexes shot-reverse-shot, cut-in,
/// cut-out, cutaway, multi-angle in that order.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_pair_new(
    seed: u64,
    pattern_code: u32,
    image_size: usize,
    out: *mut *mut NsPair,
) -> NsStatus {
    guard(|| {
        let p = make_pair(seed, pattern(pattern_code)?, image_size)?;
        write_out(out, Box::into_raw(Box::new(NsPair(p))))
    })
}

/// Copies an `h × w × 3` image of the pair, row-major, into `buf`.
///
/// # Safety
/// `pair` must be a live handle; `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ns_pair_image(pair: *const NsPair, shot: NsShot, buf: *mut f32, len: usize) -> NsStatus {
    guard(|| {
        let p = &deref(pair, "pair")?.0;
        let img = match shot {
            NsShot::Cond => &p.cond,
            NsShot::Tgt => &p.tgt,
        };
        fill(buf, len, img.data())
    })
}

/// # Safety
/// `pair` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_pair_free(pair: *mut NsPair) {
    if !pair.is_null() {
        drop(Box::from_raw(pair));
    }
}

/// Generates the next shot for the pair's condition image and prompt with
/// `steps` Euler steps, writing `h × w × 3` floats into `buf`.
///
/// # Safety
/// Handles must be live; `buf` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ns_sample_next_shot(
    model: *const NsModel,
    pair: *const NsPair,
    steps: usize,
    conditioning: NsConditioning,
    seed: u64,
    buf: *mut f32,
    len: usize,
) -> NsStatus {
    guard(|| {
        let (m, p) = (&deref(model, "model")?.0, &deref(pair, "pair")?.0);
        let mode = match conditioning {
            NsConditioning::Caci => ConditioningMode::Caci,
            NsConditioning::SyncCond => ConditioningMode::SyncCond,
            NsConditioning::CaciRelDiffusion => ConditioningMode::CaciRelDiffusion,
        };
        let img = sample_next_shot(m, &p.cond, &p.prompt, steps, &caci_plan(mode), &mut Rng::new(seed))?;
        fill(buf, len, img.data())
    })
}

/// Writes the 5×5 segment reachability matrix (row = query segment, in the
/// order rel, ind_cond, ind_tgt, vis_cond, vis_tgt) as 0/1 bytes.
///
/// # Safety
/// `out` must hold 25 bytes.
#[no_mangle]
pub unsafe extern "C" fn ns_ham_block_matrix(out: *mut u8) -> NsStatus {
    guard(|| {
        let m = ham_block_matrix();
        let flat: Vec<u8> = SegmentKind::ALL
            .into_iter()
            .flat_map(|q| SegmentKind::ALL.into_iter().map(move |k| u8::from(m.allows(q, k))))
            .collect();
        fill(out, 25, &flat)
    })
}

/// Token-level attention mask for the given segment lengths
/// (`rel, ind_cond, ind_tgt, vis_cond, vis_tgt`; `rel` ignored when
/// `with_rel` is false). Stores the token count in `out_total` and, when
/// `buf` is non-null, writes `total²` row-major 0/1 bytes.
///
/// # Safety
/// `lengths` must point to 5 values; `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ns_ham_mask(
    lengths: *const usize,
    with_rel: bool,
    buf: *mut u8,
    len: usize,
    out_total: *mut usize,
) -> NsStatus {
    guard(|| {
        if lengths.is_null() {
            return Err(fail(NsStatus::NullPointer, "lengths is null"));
        }
        let l = std::slice::from_raw_parts(lengths, 5);
        let layout = if with_rel {
            build_layout(l[0], l[1], l[2], l[3], l[4])?
        } else {
            SegmentLayout::without_rel(l[1], l[2], l[3], l[4])?
        };
        let n = layout.total();
        write_out(out_total, n)?;
        if buf.is_null() {
            return Ok(());
        }
        let mask = build_ham(&layout);
        let flat: Vec<u8> =
            (0..n).flat_map(|q| (0..n).map(move |k| (q, k))).map(|(q, k)| u8::from(mask.get(q, k))).collect();
        fill(buf, len, &flat)
    })
}

/// Fréchet distance between two embedding sets given as row-major
/// `n × dim` arrays.
///
/// # Safety
/// `a` and `b` must hold `na·dim` and `nb·dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_fid(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    out: *mut f64,
) -> NsStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(fail(NsStatus::NullPointer, "embedding array is null"));
        }
        if dim == 0 {
            return Err(fail(NsStatus::InvalidArgument, "dim must be positive"));
        }
        let rows = |p: *const f64, n: usize| {
            std::slice::from_raw_parts(p, n * dim).chunks(dim).map(<[f64]>::to_vec).collect::<Vec<_>>()
        };
        write_out(out, fid(&rows(a, na), &rows(b, nb))?)
    })
}
