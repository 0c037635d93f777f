//! C interface to the sdlseg pipeline.
//!
//! Volumes, masks and models are opaque handles created by `sdl_*_new`,
//! `sdl_*_read` or `sdl_model_load` and released with the matching
//! `sdl_*_free`. Every fallible function returns an [`SdlStatus`]; on failure
//! the message is kept per thread and can be fetched with
//! [`sdl_last_error_message`]. Voxel buffers are x-fastest:
//! `index = (z * ny + y) * nx + x`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sdlseg::nn::{load_checkpoint, UNetParams};
use sdlseg::saliency::{generate_saliency_limited, SaliencyParams};
use sdlseg::{metrics, pipeline, volume, Error, Geometry, Mask3, Volume3};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Geometry = 5,
    Shape = 6,
    Empty = 7,
    Numeric = 8,
    Panic = 9,
}

/// Image of `f32` voxels with its grid.
pub struct SdlVolume(Volume3);

/// Binary mask with its grid.
pub struct SdlMask(Mask3);

/// A trained network loaded from a checkpoint.
pub struct SdlModel(UNetParams<f32>);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> SdlStatus {
    match e {
        Error::Io { .. } => SdlStatus::Io,
        Error::Format(_) => SdlStatus::Format,
        Error::Geometry(_) => SdlStatus::Geometry,
        Error::Shape(_) => SdlStatus::Shape,
        Error::InvalidArgument(_) => SdlStatus::InvalidArgument,
        Error::Empty(_) => SdlStatus::Empty,
        Error::Numeric(_) => SdlStatus::Numeric,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SdlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SdlStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SdlStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SdlStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn geometry(dims: *const usize, spacing_mm: *const f64) -> Result<Geometry, Failure> {
    if dims.is_null() {
        return Err(Failure::Null("dims"));
    }
    if spacing_mm.is_null() {
        return Err(Failure::Null("spacing_mm"));
    }
    let d = std::slice::from_raw_parts(dims, 3);
    let s = std::slice::from_raw_parts(spacing_mm, 3);
    Ok(Geometry::new([d[0], d[1], d[2]], [s[0], s[1], s[2]], [0.0; 3])?)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, without
/// the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sdl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a volume from `dims[0] * dims[1] * dims[2]` voxels.
///
/// # Safety
/// `dims` and `spacing_mm` point to 3 values, `data` to the full voxel
/// buffer, `out` to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_volume_new(
    dims: *const usize,
    spacing_mm: *const f64,
    data: *const f32,
    out_volume: *mut *mut SdlVolume,
) -> SdlStatus {
    guard(|| {
        let slot = out(out_volume, "out_volume")?;
        let g = geometry(dims, spacing_mm)?;
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let v = Volume3::new(g, std::slice::from_raw_parts(data, g.len()).to_vec())?;
        *slot = boxed(SdlVolume(v));
        Ok(())
    })
}

/// Reads a volume file.
///
/// # Safety
/// `path` is a NUL-terminated string, `out_volume` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_volume_read(path: *const c_char, out_volume: *mut *mut SdlVolume) -> SdlStatus {
    guard(|| {
        let slot = out(out_volume, "out_volume")?;
        *slot = boxed(SdlVolume(volume::read_volume(path_arg(path)?)?));
        Ok(())
    })
}

/// Writes a volume file.
///
/// # Safety
/// `volume` is a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sdl_volume_write(volume: *const SdlVolume, path: *const c_char) -> SdlStatus {
    guard(|| {
        let v = as_ref(volume, "volume")?;
        volume::write_volume(&v.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Writes the grid size into `dims[3]`.
///
/// # Safety
/// `volume` is a live handle, `dims` points to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn sdl_volume_dims(volume: *const SdlVolume, dims: *mut usize) -> SdlStatus {
    guard(|| {
        let v = as_ref(volume, "volume")?;
        if dims.is_null() {
            return Err(Failure::Null("dims"));
        }
        ptr::copy_nonoverlapping(v.0.dims().as_ptr(), dims, 3);
        Ok(())
    })
}

/// Copies the voxels into `buf`, which must hold exactly the voxel count.
///
/// # Safety
/// `volume` is a live handle, `buf` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn sdl_volume_copy_data(volume: *const SdlVolume, buf: *mut f32, len: usize) -> SdlStatus {
    guard(|| {
        let v = as_ref(volume, "volume")?;
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        if len != v.0.data().len() {
            return Err(Error::Shape(format!("buffer holds {len} values, volume has {}", v.0.data().len())).into());
        }
        ptr::copy_nonoverlapping(v.0.data().as_ptr(), buf, len);
        Ok(())
    })
}

/// Releases a volume. Null is ignored.
///
/// # Safety
/// `volume` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdl_volume_free(volume: *mut SdlVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Creates a mask; any non-zero byte is foreground.
///
/// # Safety
/// As for [`sdl_volume_new`].
#[no_mangle]
pub unsafe extern "C" fn sdl_mask_new(
    dims: *const usize,
    spacing_mm: *const f64,
    data: *const u8,
    out_mask: *mut *mut SdlMask,
) -> SdlStatus {
    guard(|| {
        let slot = out(out_mask, "out_mask")?;
        let g = geometry(dims, spacing_mm)?;
        if data.is_null() {
            return Err(Failure::Null("data"));
        }
        let bits = std::slice::from_raw_parts(data, g.len()).iter().map(|&b| (b != 0) as u8).collect();
        *slot = boxed(SdlMask(Mask3::new(g, bits)?));
        Ok(())
    })
}

/// Reads a mask file.
///
/// # Safety
/// `path` is a NUL-terminated string, `out_mask` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_mask_read(path: *const c_char, out_mask: *mut *mut SdlMask) -> SdlStatus {
    guard(|| {
        let slot = out(out_mask, "out_mask")?;
        *slot = boxed(SdlMask(volume::read_mask(path_arg(path)?)?));
        Ok(())
    })
}

/// Writes a mask file.
///
/// # Safety
/// `mask` is a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sdl_mask_write(mask: *const SdlMask, path: *const c_char) -> SdlStatus {
    guard(|| {
        let m = as_ref(mask, "mask")?;
        volume::write_mask(&m.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of foreground voxels.
///
/// # Safety
/// `mask` is a live handle, `count` a writable value.
#[no_mangle]
pub unsafe extern "C" fn sdl_mask_count(mask: *const SdlMask, count: *mut usize) -> SdlStatus {
    guard(|| {
        let m = as_ref(mask, "mask")?;
        *out(count, "count")? = m.0.count();
        Ok(())
    })
}

/// Copies the 0/1 voxels into `buf`, which must hold exactly the voxel count.
///
/// # Safety
/// `mask` is a live handle, `buf` points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sdl_mask_copy_data(mask: *const SdlMask, buf: *mut u8, len: usize) -> SdlStatus {
    guard(|| {
        let m = as_ref(mask, "mask")?;
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        if len != m.0.data().len() {
            return Err(Error::Shape(format!("buffer holds {len} values, mask has {}", m.0.data().len())).into());
        }
        ptr::copy_nonoverlapping(m.0.data().as_ptr(), buf, len);
        Ok(())
    })
}

/// Releases a mask. Null is ignored.
///
/// # Safety
/// `mask` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdl_mask_free(mask: *mut SdlMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Saliency map of a CT in HU with default marker settings and the given
/// Gaussian width (voxels). `max_cues < 0` keeps every cue, otherwise the
/// largest `max_cues` cues are used. `out_cue_count` may be null.
///
/// # Safety
/// `ct` and `breast` are live handles; `out_saliency` is a writable slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_saliency(
    ct: *const SdlVolume,
    breast: *const SdlMask,
    sigma: f64,
    max_cues: i64,
    out_saliency: *mut *mut SdlVolume,
    out_cue_count: *mut usize,
) -> SdlStatus {
    guard(|| {
        let ct = as_ref(ct, "ct")?;
        let breast = as_ref(breast, "breast")?;
        let slot = out(out_saliency, "out_saliency")?;
        let params = SaliencyParams {
            sigma,
            ..SaliencyParams::default()
        };
        let limit = usize::try_from(max_cues).ok();
        let s = generate_saliency_limited(&ct.0, &breast.0, &params, limit)?;
        if let Some(c) = out_cue_count.as_mut() {
            *c = s.cue_count;
        }
        *slot = boxed(SdlVolume(s.map));
        Ok(())
    })
}

/// Loads a network checkpoint.
///
/// # Safety
/// `path` is a NUL-terminated string, `out_model` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_model_load(path: *const c_char, out_model: *mut *mut SdlModel) -> SdlStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let ck = load_checkpoint(&path_arg(path)?)?;
        *slot = boxed(SdlModel(ck.params));
        Ok(())
    })
}

/// Number of input channels: 1 for CT only, 2 for CT plus saliency.
///
/// # Safety
/// `model` is a live handle, `channels` a writable value.
#[no_mangle]
pub unsafe extern "C" fn sdl_model_in_channels(model: *const SdlModel, channels: *mut usize) -> SdlStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        *out(channels, "channels")? = m.0.config.in_channels;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdl_model_free(model: *mut SdlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Foreground probability and thresholded mask for a normalized CT. Pass the
/// saliency map for two-channel models and null for CT-only models.
/// `out_probability` may be null.
///
/// # Safety
/// `model` and `ct_norm` are live handles, `saliency` is null or live,
/// `out_mask` is a writable slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_predict(
    model: *const SdlModel,
    ct_norm: *const SdlVolume,
    saliency: *const SdlVolume,
    threshold: f32,
    out_probability: *mut *mut SdlVolume,
    out_mask: *mut *mut SdlMask,
) -> SdlStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let ct = as_ref(ct_norm, "ct_norm")?;
        let slot = out(out_mask, "out_mask")?;
        let sal = saliency.as_ref().map(|s| sdlseg::saliency::SaliencyMap {
            map: s.0.clone(),
            cue_count: 0,
        });
        let p = pipeline::predict(&m.0, &ct.0, sal.as_ref(), threshold)?;
        if let Some(prob) = out_probability.as_mut() {
            *prob = boxed(SdlVolume(p.prob));
        }
        *slot = boxed(SdlMask(p.mask));
        Ok(())
    })
}

/// Voxel-wise majority vote of `n` masks; ties are background.
///
/// # Safety
/// `masks` points to `n` live handles, `out_mask` is a writable slot.
#[no_mangle]
pub unsafe extern "C" fn sdl_majority_vote(masks: *const *const SdlMask, n: usize, out_mask: *mut *mut SdlMask) -> SdlStatus {
    guard(|| {
        let slot = out(out_mask, "out_mask")?;
        if masks.is_null() {
            return Err(Failure::Null("masks"));
        }
        let owned = std::slice::from_raw_parts(masks, n)
            .iter()
            .map(|&p| as_ref(p, "masks[i]").map(|m| m.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        *slot = boxed(SdlMask(pipeline::majority_vote(&owned, None)?));
        Ok(())
    })
}

unsafe fn pair_metric(
    a: *const SdlMask,
    b: *const SdlMask,
    value: *mut f64,
    f: fn(&Mask3, &Mask3) -> sdlseg::Result<f64>,
) -> SdlStatus {
    guard(|| {
        let a = as_ref(a, "a")?;
        let b = as_ref(b, "b")?;
        let v = out(value, "value")?;
        *v = f(&a.0, &b.0)?;
        Ok(())
    })
}

/// Dice similarity coefficient; 1 when both masks are empty.
///
/// # Safety
/// `a` and `b` are live handles, `value` a writable value.
#[no_mangle]
pub unsafe extern "C" fn sdl_dsc(a: *const SdlMask, b: *const SdlMask, value: *mut f64) -> SdlStatus {
    pair_metric(a, b, value, metrics::dsc)
}

/// 95th percentile symmetric surface distance in mm. Fails with
/// `Empty` when either mask is empty.
///
/// # Safety
/// As for [`sdl_dsc`].
#[no_mangle]
pub unsafe extern "C" fn sdl_hd95(a: *const SdlMask, b: *const SdlMask, value: *mut f64) -> SdlStatus {
    pair_metric(a, b, value, metrics::hd95)
}

/// Average symmetric surface distance in mm. Fails with `Empty` when either
/// mask is empty.
///
/// # Safety
/// As for [`sdl_dsc`].
#[no_mangle]
pub unsafe extern "C" fn sdl_asd(a: *const SdlMask, b: *const SdlMask, value: *mut f64) -> SdlStatus {
    pair_metric(a, b, value, metrics::asd)
}
