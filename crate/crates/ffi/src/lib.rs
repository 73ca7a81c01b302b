//! C ABI over `pulse_core`.
//!
//! Every entry point returns a [`PulseStatus`]; on failure the message is
//! available from [`pulse_last_error`] on the same thread. Handles are
//! opaque and must be released with their `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pulse_core::autodiff::Graph;
use pulse_core::autodiff::Tensor;
use pulse_core::dataset::{read_fold_archive, FoldArchive};
use pulse_core::mae::{make_mask_plan, PhysioMae, TokenSplit};
use pulse_core::metrics::{self, BinaryMetrics, MetricsReport};
use pulse_core::signal::{build_loso_folds, process_all};
use pulse_core::train::{run_preset, PresetId, RunConfig};
use pulse_core::PulseError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PulseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Diverged = 7,
    NonFinite = 8,
    Internal = 99,
}

impl From<&PulseError> for PulseStatus {
    fn from(e: &PulseError) -> Self {
        match e {
            PulseError::Io(_) => Self::Io,
            PulseError::Format(_) | PulseError::Version { .. } | PulseError::MissingArray(_) => Self::Format,
            PulseError::Shape(_) => Self::Shape,
            PulseError::Config(_) => Self::Config,
            PulseError::Diverged(_) => Self::Diverged,
            PulseError::NonFinite(_) => Self::NonFinite,
            PulseError::InvalidArgument(_)
            | PulseError::NoBaseline(_)
            | PulseError::DegenerateChannel { .. }
            | PulseError::MissingChannel(_) => Self::InvalidArgument,
            PulseError::Invariant(_) => Self::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(PulseStatus, String);

impl From<PulseError> for Fail {
    fn from(e: PulseError) -> Self {
        Fail(PulseStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PulseStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PulseStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PulseStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PulseStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            PulseStatus::Internal
        }
    }
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

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn labels_arg(p: *const u8, n: usize) -> Result<Vec<bool>, Fail> {
    slice(p, n, "labels")?
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(invalid(format!("binary label {v} is not 0 or 1"))),
        })
        .collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn pulse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn pulse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PulseBinaryMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

impl From<BinaryMetrics> for PulseBinaryMetrics {
    fn from(m: BinaryMetrics) -> Self {
        Self {
            auroc: m.auroc,
            auprc: m.auprc,
            accuracy: m.accuracy,
            threshold: m.threshold,
        }
    }
}

#[no_mangle]
pub unsafe extern "C" fn pulse_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> PulseStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = labels_arg(labels, n)?;
        *out_ref(out, "out")? = metrics::auroc(s, &l)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pulse_auprc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> PulseStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = labels_arg(labels, n)?;
        *out_ref(out, "out")? = metrics::auprc(s, &l)?;
        Ok(())
    })
}

/// AUROC, AUPRC and accuracy at `threshold` (`score >= threshold` is positive).
#[no_mangle]
pub unsafe extern "C" fn pulse_binary_metrics(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut PulseBinaryMetrics,
) -> PulseStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = labels_arg(labels, n)?;
        *out_ref(out, "out")? = metrics::binary_metrics(s, &l, threshold)?.into();
        Ok(())
    })
}

/// One-vs-rest macro metrics; `scores` is row-major `[n, k]`, accuracy is by argmax.
#[no_mangle]
pub unsafe extern "C" fn pulse_macro_multiclass(
    scores: *const f64,
    classes: *const u32,
    n: usize,
    k: usize,
    out: *mut PulseBinaryMetrics,
) -> PulseStatus {
    guard(|| {
        let s = slice(scores, n.checked_mul(k).ok_or_else(|| invalid("n * k overflows"))?, "scores")?;
        let c: Vec<usize> = slice(classes, n, "classes")?.iter().map(|&c| c as usize).collect();
        *out_ref(out, "out")? = metrics::macro_multiclass(s, &c, k)?.into();
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PulseCollapse {
    pub mean_pairwise_cosine: f64,
    pub mean_feature_variance: f64,
    pub excluded_pairs: usize,
}

/// Collapse statistics of row-major embeddings `[n, d]`.
#[no_mangle]
pub unsafe extern "C" fn pulse_collapse_diagnostics(
    emb: *const f32,
    n: usize,
    d: usize,
    out: *mut PulseCollapse,
) -> PulseStatus {
    guard(|| {
        let e = slice(emb, n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?, "emb")?;
        let r = metrics::collapse_diagnostics("ffi", e, n, d)?;
        *out_ref(out, "out")? = PulseCollapse {
            mean_pairwise_cosine: r.mean_pairwise_cosine,
            mean_feature_variance: r.mean_feature_variance,
            excluded_pairs: r.excluded_pairs,
        };
        Ok(())
    })
}

/// A loaded fold archive.
pub struct PulseFold(FoldArchive);

#[no_mangle]
pub unsafe extern "C" fn pulse_fold_open(path: *const c_char, out: *mut *mut PulseFold) -> PulseStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let f = read_fold_archive(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(PulseFold(f)));
        Ok(())
    })
}

/// Fold id, training and test window counts.
#[no_mangle]
pub unsafe extern "C" fn pulse_fold_info(
    fold: *const PulseFold,
    fold_id: *mut u32,
    n_train: *mut usize,
    n_test: *mut usize,
) -> PulseStatus {
    guard(|| {
        let f = &fold.as_ref().ok_or_else(|| null("fold"))?.0;
        *out_ref(fold_id, "fold_id")? = f.fold_id;
        *out_ref(n_train, "n_train")? = f.n_train();
        *out_ref(n_test, "n_test")? = f.n_test();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pulse_fold_free(fold: *mut PulseFold) {
    if !fold.is_null() {
        drop(Box::from_raw(fold));
    }
}

/// A loaded encoder checkpoint.
pub struct PulseEncoder(PhysioMae);

#[no_mangle]
pub unsafe extern "C" fn pulse_encoder_load(path: *const c_char, out: *mut *mut PulseEncoder) -> PulseStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let (m, _) = PhysioMae::load(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(PulseEncoder(m)));
        Ok(())
    })
}

/// Window length in samples and embedding width.
#[no_mangle]
pub unsafe extern "C" fn pulse_encoder_shape(
    enc: *const PulseEncoder,
    window_len: *mut usize,
    dim: *mut usize,
) -> PulseStatus {
    guard(|| {
        let m = &enc.as_ref().ok_or_else(|| null("encoder"))?.0;
        *out_ref(window_len, "window_len")? = m.cfg.signal_len;
        *out_ref(dim, "dim")? = m.cfg.enc_dim;
        Ok(())
    })
}

/// Mean-pooled encoder output of `n` normalised windows (row-major
/// `[n, window_len]`) into `out` (`[n, dim]`).
#[no_mangle]
pub unsafe extern "C" fn pulse_encoder_embed(
    enc: *const PulseEncoder,
    windows: *const f32,
    n: usize,
    out: *mut f32,
) -> PulseStatus {
    guard(|| {
        let m = &enc.as_ref().ok_or_else(|| null("encoder"))?.0;
        let (len, d) = (m.cfg.signal_len, m.cfg.enc_dim);
        if n == 0 {
            return Ok(());
        }
        let x = slice(windows, n * len, "windows")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let dst = std::slice::from_raw_parts_mut(out, n * d);
        let np = m.cfg.n_patches();
        let plan = make_mask_plan(np, 0.0, 0);
        let split = TokenSplit::all_private(np);
        let mut g = Graph::<f32>::new();
        let p = m.params.bind(&mut g, false);
        let xv = g.constant(Tensor::new(vec![n, len], x.to_vec())?);
        let b = m.encode(&mut g, &p, xv, &plan, &split)?;
        let tok = g.gather(b.last, 1, &b.patch_rows());
        let pooled = g.mean(tok, 1);
        dst.copy_from_slice(g.value(pooled).data());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pulse_encoder_free(enc: *mut PulseEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Per-fold metrics of one preset run.
pub struct PulseReport(MetricsReport);

/// Runs `preset` (one of "A".."E") for one seed. `config_toml` may be null
/// for the defaults; `folds_dir` null means synthetic data, in which case the
/// small synthetic profile is the base the config is layered over.
#[no_mangle]
pub unsafe extern "C" fn pulse_run_preset(
    preset: *const c_char,
    config_toml: *const c_char,
    folds_dir: *const c_char,
    seed: u64,
    out: *mut *mut PulseReport,
) -> PulseStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let name = path_arg(preset, "preset")?;
        let p: PresetId = name.to_string_lossy().parse()?;
        let synthetic = folds_dir.is_null();
        let base = if synthetic { RunConfig::quick() } else { RunConfig::default() };
        let cfg = if config_toml.is_null() {
            base
        } else {
            let text = CStr::from_ptr(config_toml)
                .to_str()
                .map_err(|_| invalid("config is not UTF-8"))?;
            RunConfig::from_toml_over(&base, text)?
        };
        let folds = if synthetic {
            let recs = pulse_core::dataset::generate_synthetic_dataset(&cfg.synthetic)?;
            build_loso_folds(&process_all(&recs, &cfg.preprocess)?)?
        } else {
            pulse_core::dataset::read_fold_dir(&path_arg(folds_dir, "folds_dir")?)?
        };
        let mut reports = run_preset(&[p], &folds, &cfg, &[seed])?;
        let r = reports
            .remove(&p)
            .and_then(|mut v| v.pop())
            .ok_or_else(|| Fail(PulseStatus::Internal, "no report produced".into()))?;
        *slot = Box::into_raw(Box::new(PulseReport(r)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pulse_report_n_folds(report: *const PulseReport, out: *mut usize) -> PulseStatus {
    guard(|| {
        *out_ref(out, "out")? = report.as_ref().ok_or_else(|| null("report"))?.0.folds.len();
        Ok(())
    })
}

/// Metrics of fold `i` (0-based, in fold order).
#[no_mangle]
pub unsafe extern "C" fn pulse_report_fold(
    report: *const PulseReport,
    i: usize,
    out: *mut PulseBinaryMetrics,
) -> PulseStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.0;
        let f = r
            .folds
            .get(i)
            .ok_or_else(|| invalid(format!("fold index {i} out of range ({} folds)", r.folds.len())))?;
        *out_ref(out, "out")? = f.metrics.clone().into();
        Ok(())
    })
}

/// Mean and sample sd of the per-fold AUROC.
#[no_mangle]
pub unsafe extern "C" fn pulse_report_auroc(report: *const PulseReport, mean: *mut f64, sd: *mut f64) -> PulseStatus {
    guard(|| {
        let (m, s) = report.as_ref().ok_or_else(|| null("report"))?.0.auroc();
        *out_ref(mean, "mean")? = m;
        *out_ref(sd, "sd")? = s;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pulse_report_free(report: *mut PulseReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
