//! C ABI for hand features, encoder inference and nearest-prototype
//! classification.
//!
//! Every fallible function returns a [`GeomshotStatus`]. On failure a
//! message is kept per thread and can be read with
//! [`geomshot_last_error`]. Buffers are row-major `double` arrays whose
//! lengths are passed explicitly; nothing is written on failure except
//! possibly a partially filled output buffer that should be discarded.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use geomshot::dataio::Representation;
use geomshot::fewshot;
use geomshot::geometry::{HandKeypoints, RAW_DIM};
use geomshot::nnet::Checkpoint;
use geomshot::Error;
use ndarray::{Array2, ArrayView2};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomshotStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// All keypoints coincide, so the hand cannot be scale-normalised.
    DegenerateHand = 3,
    Io = 4,
    CorruptCheckpoint = 5,
    /// A buffer length does not match the expected shape.
    Shape = 6,
    /// An internal error; see `geomshot_last_error`.
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomshotRepresentation {
    /// Wrist-centred, scale-normalised coordinates (63 values).
    Raw = 0,
    /// Joint angles in radians (20 values).
    Angle = 1,
    /// `Raw` followed by `Angle` (83 values).
    RawAngle = 2,
    /// Unprocessed coordinates (63 values).
    RawUnnormalized = 3,
}

impl From<GeomshotRepresentation> for Representation {
    fn from(r: GeomshotRepresentation) -> Self {
        match r {
            GeomshotRepresentation::Raw => Representation::Raw,
            GeomshotRepresentation::Angle => Representation::Angle,
            GeomshotRepresentation::RawAngle => Representation::RawAngle,
            GeomshotRepresentation::RawUnnormalized => Representation::RawUnnormalized,
        }
    }
}

/// A loaded encoder. Create with `geomshot_encoder_load`, release with
/// `geomshot_encoder_free`.
pub struct GeomshotEncoder {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GeomshotStatus {
    match e {
        Error::DegenerateHand { .. } => GeomshotStatus::DegenerateHand,
        Error::Io { .. } => GeomshotStatus::Io,
        Error::CorruptCheckpoint(_) => GeomshotStatus::CorruptCheckpoint,
        Error::Shape(_) => GeomshotStatus::Shape,
        Error::InvalidKeypoints(_) | Error::Config(_) => GeomshotStatus::InvalidArgument,
        _ => GeomshotStatus::Internal,
    }
}

fn fail(status: GeomshotStatus, msg: impl Into<String>) -> GeomshotStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, recording errors and converting panics.
fn guard(f: impl FnOnce() -> Result<(), GeomshotStatus>) -> GeomshotStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GeomshotStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(GeomshotStatus::Internal, "internal panic"),
    }
}

fn lift(e: Error) -> GeomshotStatus {
    fail(status_of(&e), e.to_string())
}

fn shape(msg: String) -> GeomshotStatus {
    fail(GeomshotStatus::Shape, msg)
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn input<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], GeomshotStatus> {
    if p.is_null() {
        return Err(fail(GeomshotStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn output<'a, T>(p: *mut T, len: usize, name: &str) -> Result<&'a mut [T], GeomshotStatus> {
    if p.is_null() {
        return Err(fail(GeomshotStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn geomshot_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn geomshot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of values a representation produces.
#[no_mangle]
pub extern "C" fn geomshot_feature_dim(representation: GeomshotRepresentation) -> usize {
    Representation::from(representation).dim()
}

/// Computes features for one hand given as 21 `(x, y, z)` rows (63 values).
///
/// # Safety
/// `keypoints` must point to 63 doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn geomshot_features(
    keypoints: *const f64,
    representation: GeomshotRepresentation,
    out: *mut f64,
    out_len: usize,
) -> GeomshotStatus {
    guard(|| {
        let kp = input(keypoints, RAW_DIM, "keypoints")?;
        let repr = Representation::from(representation);
        if out_len != repr.dim() {
            return Err(shape(format!("{repr} features need {} values, buffer has {out_len}", repr.dim())));
        }
        let out = output(out, out_len, "out")?;
        let hand = HandKeypoints::from_flat(kp).map_err(lift)?;
        out.copy_from_slice(&repr.extract(&hand).map_err(lift)?);
        Ok(())
    })
}

/// Loads an encoder checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn geomshot_encoder_load(path: *const c_char, out: *mut *mut GeomshotEncoder) -> GeomshotStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(GeomshotStatus::NullPointer, "path or out is null"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(GeomshotStatus::InvalidArgument, "path is not UTF-8"))?;
        let checkpoint = Checkpoint::load(path).map_err(lift)?;
        *out = Box::into_raw(Box::new(GeomshotEncoder { checkpoint }));
        Ok(())
    })
}

/// Releases a handle from `geomshot_encoder_load`. Null is ignored.
///
/// # Safety
/// `encoder` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn geomshot_encoder_free(encoder: *mut GeomshotEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Input width of the encoder, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn geomshot_encoder_input_dim(encoder: *const GeomshotEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.checkpoint.meta.encoder.input_dim)
}

/// Embedding width of the encoder, or 0 for a null handle.
///
/// # Safety
/// `encoder` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn geomshot_encoder_embed_dim(encoder: *const GeomshotEncoder) -> usize {
    encoder.as_ref().map_or(0, |e| e.checkpoint.meta.encoder.embed_dim)
}

/// Embeds `rows` feature vectors of width `cols` (must equal the input
/// width) in inference mode. `out` receives `rows * embed_dim` values.
///
/// # Safety
/// `encoder` must be a live handle, `x` valid for `rows * cols` reads and
/// `out` for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn geomshot_encoder_embed(
    encoder: *const GeomshotEncoder,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> GeomshotStatus {
    guard(|| {
        let enc = encoder
            .as_ref()
            .ok_or_else(|| fail(GeomshotStatus::NullPointer, "encoder is null"))?;
        let cfg = enc.checkpoint.meta.encoder;
        if cols != cfg.input_dim {
            return Err(shape(format!("encoder expects {} columns, got {cols}", cfg.input_dim)));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| shape("rows * cols overflows".into()))?;
        if out_len != rows * cfg.embed_dim {
            return Err(shape(format!("output needs {} values, buffer has {out_len}", rows * cfg.embed_dim)));
        }
        let x = input(x, n, "x")?;
        let out = output(out, out_len, "out")?;
        let batch = Array2::from_shape_vec((rows, cols), x.to_vec()).map_err(|e| shape(e.to_string()))?;
        let emb = enc.checkpoint.encoder.forward_eval(&batch).map_err(lift)?;
        for (o, v) in out.iter_mut().zip(emb.iter()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Nearest-prototype classification. Prototypes are the per-label means of
/// the `n_support` support rows (labels in `0..n_way`, every label with the
/// same non-zero number of rows);
/// each of the `n_query` query rows is assigned the label of the closest
/// prototype in squared Euclidean distance, ties going to the lower label.
///
/// # Safety
/// `support` must be valid for `n_support * dim` reads, `labels` for
/// `n_support`, `query` for `n_query * dim`, and `predictions` for
/// `n_query` writes.
#[no_mangle]
pub unsafe extern "C" fn geomshot_classify(
    support: *const f64,
    labels: *const usize,
    n_support: usize,
    n_way: usize,
    query: *const f64,
    n_query: usize,
    dim: usize,
    predictions: *mut usize,
) -> GeomshotStatus {
    guard(|| {
        if dim == 0 || n_support == 0 || n_way == 0 {
            return Err(fail(GeomshotStatus::InvalidArgument, "dim, n_support and n_way must be positive"));
        }
        let s_len = n_support
            .checked_mul(dim)
            .ok_or_else(|| shape("n_support * dim overflows".into()))?;
        let q_len = n_query
            .checked_mul(dim)
            .ok_or_else(|| shape("n_query * dim overflows".into()))?;
        let s = input(support, s_len, "support")?;
        let l = input(labels, n_support, "labels")?;
        let q = if n_query == 0 { &[][..] } else { input(query, q_len, "query")? };
        let out = if n_query == 0 { &mut [][..] } else { output(predictions, n_query, "predictions")? };
        let s = ArrayView2::from_shape((n_support, dim), s).map_err(|e| shape(e.to_string()))?;
        let q = ArrayView2::from_shape((n_query, dim), q).map_err(|e| shape(e.to_string()))?;
        let protos = fewshot::compute_prototypes(s, l, n_way).map_err(|e| fail(GeomshotStatus::InvalidArgument, e.to_string()))?;
        out.copy_from_slice(&fewshot::classify(q, &protos));
        Ok(())
    })
}
