//! C interface to the spectrogram foundation model.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `*_synthesize` functions and released with the matching `*_free`.
//! Every fallible function returns a [`SpecfmStatus`]; on failure the
//! message is kept per thread and can be read with [`specfm_last_error`].
//! Panics never unwind into the caller, they surface as
//! `SPECFM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use specfm::autodiff::load_checkpoint;
use specfm::moe::{self, EvalCounter, Expert, ExpertBank, RouteMode, RouterParams, N_EXPERTS};
use specfm::specgen::{load_dataset, Dataset, DatasetConfig, Spectrogram, SpectrogramLabel};
use specfm::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Compute = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Routing choice for [`specfm_moe_infer`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecfmRouteMode {
    /// Use the mode stored in the bundle.
    BundleDefault = 0,
    Top1 = 1,
    Dense = 2,
}

/// Generation metadata of one dataset record. Enumerations are indices in
/// the library's canonical order (protocol: WIFI, LTE, NR; modulation: BPSK,
/// QPSK, 16QAM, 64QAM, 256QAM; mobility: static, pedestrian, vehicular).
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpecfmLabel {
    pub protocol: u32,
    pub modulation: u32,
    pub mobility: u32,
    pub snr_db: f64,
    pub doppler_hz: f64,
    pub seed: u64,
}

/// Normalized spectrograms held in memory.
pub struct SpecfmDataset {
    records: Vec<Spectrogram>,
}

/// A single encoder producing pooled embeddings.
pub struct SpecfmEncoder {
    expert: Expert,
}

/// Router plus three protocol experts.
pub struct SpecfmMoe {
    router: RouterParams,
    bank: ExpertBank,
    mode: RouteMode,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(SpecfmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SpecfmStatus::Io,
            Error::BadMagic(_) | Error::VersionMismatch { .. } | Error::TruncatedShard { .. } | Error::Json(_) => {
                SpecfmStatus::Format
            }
            Error::Shape(_) | Error::Index { .. } | Error::SequenceTooLong { .. } => SpecfmStatus::Shape,
            Error::Config(_) | Error::MissingParam(_) | Error::InsufficientSamples { .. } => SpecfmStatus::Config,
            _ => SpecfmStatus::Compute,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: SpecfmStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpecfmStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (SpecfmStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(payload) => {
            let m = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".to_string());
            (SpecfmStatus::Panic, m)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(SpecfmStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SpecfmStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(SpecfmStatus::NullPointer, format!("{what} handle is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(SpecfmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(SpecfmStatus::NullPointer, "output buffer is null"));
    }
    if len < needed {
        return Err(fail(SpecfmStatus::BufferTooSmall, format!("output buffer holds {len}, {needed} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

/// Wrap a caller-supplied, already normalized `frames x bins` grid.
unsafe fn grid_arg(data: *const f32, frames: usize, bins: usize) -> Result<Spectrogram, Failure> {
    if data.is_null() {
        return Err(fail(SpecfmStatus::NullPointer, "spectrogram data is null"));
    }
    if frames == 0 || bins == 0 {
        return Err(fail(SpecfmStatus::InvalidArgument, "spectrogram must be non-empty"));
    }
    Ok(Spectrogram {
        frames,
        bins,
        channels: 1,
        data: std::slice::from_raw_parts(data, frames * bins).to_vec(),
        label: SpectrogramLabel::default(),
        normalized: true,
    })
}

fn into_handle<T>(value: T, out: &mut *mut T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn specfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the message length in
/// bytes, excluding the terminator, so a caller can size the buffer.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn specfm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Load a dataset directory written by `specfm generate` and normalize it
/// with its own statistics.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_load(path: *const c_char, out: *mut *mut SpecfmDataset) -> SpecfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (_, ds) = load_dataset(path_arg(path)?)?;
        into_handle(
            SpecfmDataset {
                records: ds.normalized(&ds.stats),
            },
            out,
        );
        Ok(())
    })
}

/// Synthesize the default sweep in memory with `n_realizations` per grid
/// cell and normalize it with its own statistics.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_synthesize(
    master_seed: u64,
    n_realizations: u32,
    out: *mut *mut SpecfmDataset,
) -> SpecfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if n_realizations == 0 {
            return Err(fail(SpecfmStatus::InvalidArgument, "n_realizations must be positive"));
        }
        let ds = Dataset::synthesize(&DatasetConfig {
            master_seed,
            n_realizations: n_realizations as usize,
            ..DatasetConfig::default()
        })?;
        into_handle(
            SpecfmDataset {
                records: ds.normalized(&ds.stats),
            },
            out,
        );
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_len(ds: *const SpecfmDataset, len: *mut usize) -> SpecfmStatus {
    guard(|| {
        *out_ptr(len, "len")? = handle(ds, "dataset")?.records.len();
        Ok(())
    })
}

fn record(ds: &SpecfmDataset, index: usize) -> Result<&Spectrogram, Failure> {
    ds.records.get(index).ok_or_else(|| {
        Failure::from(Error::Index {
            index,
            len: ds.records.len(),
        })
    })
}

/// Grid size of record `index`.
///
/// # Safety
/// `ds` must be a live dataset handle; `frames` and `bins` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_shape(
    ds: *const SpecfmDataset,
    index: usize,
    frames: *mut usize,
    bins: *mut usize,
) -> SpecfmStatus {
    guard(|| {
        let s = record(handle(ds, "dataset")?, index)?;
        *out_ptr(frames, "frames")? = s.frames;
        *out_ptr(bins, "bins")? = s.bins;
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live dataset handle and `label` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_label(
    ds: *const SpecfmDataset,
    index: usize,
    label: *mut SpecfmLabel,
) -> SpecfmStatus {
    guard(|| {
        let l = &record(handle(ds, "dataset")?, index)?.label;
        *out_ptr(label, "label")? = SpecfmLabel {
            protocol: l.protocol.index() as u32,
            modulation: l.modulation.index() as u32,
            mobility: l.mobility.index() as u32,
            snr_db: l.snr_db,
            doppler_hz: l.doppler_hz,
            seed: l.seed,
        };
        Ok(())
    })
}

/// Copy the normalized values of record `index` (row-major, frames x bins)
/// into `out`, which must hold at least `frames * bins` floats.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_copy(
    ds: *const SpecfmDataset,
    index: usize,
    out: *mut f32,
    len: usize,
) -> SpecfmStatus {
    guard(|| {
        let s = record(handle(ds, "dataset")?, index)?;
        out_slice(out, len, s.data.len())?.copy_from_slice(&s.data);
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specfm_dataset_free(ds: *mut SpecfmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Load an encoder checkpoint (pretrained or fine-tuned).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_encoder_load(path: *const c_char, out: *mut *mut SpecfmEncoder) -> SpecfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ckpt = load_checkpoint(&path_arg(path)?)?;
        let cfg = moe::checkpoint_encoder(&ckpt)?;
        cfg.validate()?;
        into_handle(
            SpecfmEncoder {
                expert: Expert {
                    cfg,
                    params: ckpt.params,
                },
            },
            out,
        );
        Ok(())
    })
}

/// Embedding width of the encoder.
///
/// # Safety
/// `enc` must be a live encoder handle and `dim` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_encoder_dim(enc: *const SpecfmEncoder, dim: *mut usize) -> SpecfmStatus {
    guard(|| {
        *out_ptr(dim, "dim")? = handle(enc, "encoder")?.expert.cfg.dim;
        Ok(())
    })
}

/// Mean-pooled embedding of one normalized `frames x bins` grid.
///
/// # Safety
/// `enc` must be a live encoder handle, `data` valid for `frames * bins`
/// floats and `out` valid for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn specfm_encoder_embed(
    enc: *const SpecfmEncoder,
    data: *const f32,
    frames: usize,
    bins: usize,
    out: *mut f32,
    out_len: usize,
) -> SpecfmStatus {
    guard(|| {
        let enc = handle(enc, "encoder")?;
        let s = grid_arg(data, frames, bins)?;
        let h = enc.expert.embed(&s)?;
        out_slice(out, out_len, h.len())?.copy_from_slice(&h);
        Ok(())
    })
}

/// # Safety
/// `enc` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specfm_encoder_free(enc: *mut SpecfmEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Load a bundle directory written by `specfm train-router`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn specfm_moe_load(dir: *const c_char, out: *mut *mut SpecfmMoe) -> SpecfmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (manifest, router, bank) = moe::load_bundle(&path_arg(dir)?)?;
        into_handle(
            SpecfmMoe {
                router,
                bank,
                mode: manifest.mode_default,
            },
            out,
        );
        Ok(())
    })
}

/// Route one normalized grid and aggregate the expert embeddings.
/// `mode` is a `SpecfmRouteMode` value.
///
/// `weights` (may be null) receives the three gate weights, `chosen` (may
/// be null) the selected expert index, `evals` (may be null) the number of
/// expert forward passes spent. `out` receives the embedding.
///
/// # Safety
/// `moe` must be a live bundle handle, `data` valid for `frames * bins`
/// floats, `weights` null or valid for 3 doubles, `out` valid for `out_len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn specfm_moe_infer(
    moe: *const SpecfmMoe,
    data: *const f32,
    frames: usize,
    bins: usize,
    mode: u32,
    weights: *mut f64,
    chosen: *mut u32,
    evals: *mut usize,
    out: *mut f32,
    out_len: usize,
) -> SpecfmStatus {
    guard(|| {
        let m = handle(moe, "moe")?;
        let s = grid_arg(data, frames, bins)?;
        let mode = match mode {
            x if x == SpecfmRouteMode::BundleDefault as u32 => m.mode,
            x if x == SpecfmRouteMode::Top1 as u32 => RouteMode::Top1,
            x if x == SpecfmRouteMode::Dense as u32 => RouteMode::Dense,
            x => return Err(fail(SpecfmStatus::InvalidArgument, format!("unknown route mode {x}"))),
        };
        let r = moe::moe_infer(&s, &m.router, &m.bank, mode, None, &EvalCounter::default())?;
        out_slice(out, out_len, r.embedding.len())?.copy_from_slice(&r.embedding);
        if !weights.is_null() {
            std::slice::from_raw_parts_mut(weights, N_EXPERTS).copy_from_slice(&r.decision.weights);
        }
        if let Some(c) = chosen.as_mut() {
            *c = r.decision.chosen as u32;
        }
        if let Some(e) = evals.as_mut() {
            *e = r.expert_evals;
        }
        Ok(())
    })
}

/// # Safety
/// `moe` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specfm_moe_free(moe: *mut SpecfmMoe) {
    if !moe.is_null() {
        drop(Box::from_raw(moe));
    }
}
