//! C ABI over the `cxrl` pipeline: frozen reward scoring, sampling from a
//! generator checkpoint and the command-line driver.
//!
//! Handles are opaque and owned by the caller; free them with the matching
//! `*_free` function. Every fallible call returns a `cxrl_status`; the text
//! of the most recent failure on the calling thread is available through
//! [`cxrl_last_error`]. The declarations live in `include/cxrl.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cxrl::cli::commands::{generate, generator_arch, load_rewards};
use cxrl::cli::{Checkpoint, CheckpointError, CliError, Config};
use cxrl::numcore::ParamStore;
use cxrl::phantom::{Image, PostureParams, K_LABELS};
use cxrl::rewards::{reward_align, AccuracyMode, Lambda, RewardModels};
use cxrl::textcond::{encode_report, tokenize};

pub const CXRL_OK: c_int = 0;
pub const CXRL_ERR_NULL: c_int = 1;
pub const CXRL_ERR_INVALID: c_int = 2;
pub const CXRL_ERR_IO: c_int = 3;
pub const CXRL_ERR_DIVERGED: c_int = 4;
pub const CXRL_ERR_BAD_MAGIC: c_int = 5;
pub const CXRL_ERR_VERSION: c_int = 6;
pub const CXRL_ERR_HASH: c_int = 7;
pub const CXRL_ERR_TRUNCATED: c_int = 8;
pub const CXRL_ERR_BUFFER: c_int = 9;
pub const CXRL_ERR_PANIC: c_int = 10;
pub const CXRL_ERR_FAILED: c_int = 11;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

struct Failure(c_int, String);

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => CXRL_ERR_IO,
            CheckpointError::BadMagic => CXRL_ERR_BAD_MAGIC,
            CheckpointError::UnsupportedVersion(_) => CXRL_ERR_VERSION,
            CheckpointError::HashMismatch => CXRL_ERR_HASH,
            CheckpointError::Truncated => CXRL_ERR_TRUNCATED,
            CheckpointError::Format(_) => CXRL_ERR_INVALID,
        };
        Failure(code, e.to_string())
    }
}

impl From<CliError> for Failure {
    fn from(e: CliError) -> Self {
        match e {
            CliError::Checkpoint(c) => c.into(),
            CliError::Io { .. } => Failure(CXRL_ERR_IO, e.to_string()),
            CliError::Diverged(_) => Failure(CXRL_ERR_DIVERGED, e.to_string()),
            CliError::Config(_) | CliError::Usage(_) => Failure(CXRL_ERR_INVALID, e.to_string()),
            _ => Failure(CXRL_ERR_FAILED, e.to_string()),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CXRL_ERR_INVALID, msg.into())
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CXRL_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            CXRL_ERR_PANIC
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(CXRL_ERR_NULL, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn read_image(p: *const f64, side: usize, what: &str) -> Result<Image, Failure> {
    if p.is_null() {
        return Err(Failure(CXRL_ERR_NULL, format!("{what} is null")));
    }
    let px = std::slice::from_raw_parts(p, side * side).to_vec();
    if px.iter().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{what} has non-finite pixels")));
    }
    Image::new(side, side, px).map_err(|e| invalid(e.to_string()))
}

/// Frozen reward models loaded from a `rewards.ckpt`.
pub struct CxrlRewards {
    models: RewardModels,
    side: usize,
}

/// Generator loaded from a `generator.ckpt` or `finetuned.ckpt`.
pub struct CxrlGenerator {
    store: ParamStore,
    config: Config,
    use_ace: bool,
}

/// Mirrors `cxrl_reward_breakdown` in the header.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CxrlRewardBreakdown {
    pub r_align: f64,
    pub r_diag: f64,
    pub r_consist: f64,
    pub total: f64,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cxrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cxrl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Posture reward of `psi = {s_x, s_y, t_x, t_y, theta}`.
///
/// # Safety
/// `psi` must point to five readable doubles.
#[no_mangle]
pub unsafe extern "C" fn cxrl_reward_align(psi: *const f64) -> f64 {
    if psi.is_null() {
        return f64::NAN;
    }
    let a = std::slice::from_raw_parts(psi, 5);
    reward_align(&PostureParams::from_array([a[0], a[1], a[2], a[3], a[4]]))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cxrl_rewards_load(path: *const c_char, out: *mut *mut CxrlRewards) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(Failure(CXRL_ERR_NULL, "out is null".into()));
        }
        let path = PathBuf::from(text(path, "path")?);
        let (models, _) = load_rewards(&path)?;
        let side = (models.posture.image_dim() as f64).sqrt().round() as usize;
        *out = Box::into_raw(Box::new(CxrlRewards { models, side }));
        Ok(())
    })
}

/// Side length of the square images the reward models expect.
///
/// # Safety
/// `models` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cxrl_rewards_image_side(models: *const CxrlRewards) -> usize {
    models.as_ref().map_or(0, |m| m.side)
}

/// Scores a (policy image, anchor image) pair for one report. Images are
/// row-major `side × side` arrays in `[0, 1]`; `labels` holds four 0/1
/// bytes; `lambda` is `{align, diag, consist}`.
///
/// # Safety
/// Every pointer must be valid for the sizes above; `models` must be live.
#[no_mangle]
pub unsafe extern "C" fn cxrl_rewards_score(
    models: *const CxrlRewards,
    image: *const f64,
    anchor_image: *const f64,
    report: *const c_char,
    labels: *const u8,
    lambda: *const f64,
    out: *mut CxrlRewardBreakdown,
) -> c_int {
    guard(|| {
        let m = models.as_ref().ok_or_else(|| Failure(CXRL_ERR_NULL, "models is null".into()))?;
        if labels.is_null() || lambda.is_null() || out.is_null() {
            return Err(Failure(CXRL_ERR_NULL, "labels, lambda and out must be non-null".into()));
        }
        let x = read_image(image, m.side, "image")?;
        let xa = read_image(anchor_image, m.side, "anchor_image")?;
        let report = text(report, "report")?;
        let labels = std::slice::from_raw_parts(labels, K_LABELS);
        let l = std::slice::from_raw_parts(lambda, 3);
        let lambda = Lambda {
            align: l[0],
            diag: l[1],
            consist: l[2],
        };
        let r = m
            .models
            .total_reward(&x, &xa, report, labels, lambda, AccuracyMode::Thresholded)
            .map_err(|e| invalid(e.to_string()))?;
        *out = CxrlRewardBreakdown {
            r_align: r.r_align,
            r_diag: r.r_diag,
            r_consist: r.r_consist,
            total: r.total,
        };
        Ok(())
    })
}

/// # Safety
/// `models` must be null or a handle from [`cxrl_rewards_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cxrl_rewards_free(models: *mut CxrlRewards) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Loads a generator checkpoint. The architecture comes from the config
/// snapshot stored in the file; condition rows are used when present.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cxrl_generator_load(path: *const c_char, out: *mut *mut CxrlGenerator) -> c_int {
    guard(|| {
        if out.is_null() {
            return Err(Failure(CXRL_ERR_NULL, "out is null".into()));
        }
        let path = PathBuf::from(text(path, "path")?);
        let ck = Checkpoint::load(&path)?;
        let config = Config::from_pairs(&ck.config).map_err(|e| invalid(e.to_string()))?;
        let store = ck.store("generator")?.clone();
        let use_ace = store.contains(cxrl::textcond::ACE_PARAM);
        *out = Box::into_raw(Box::new(CxrlGenerator { store, config, use_ace }));
        Ok(())
    })
}

/// Number of pixels in one generated image.
///
/// # Safety
/// `gen` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cxrl_generator_image_len(gen: *const CxrlGenerator) -> usize {
    gen.as_ref().map_or(0, |g| g.config.image_size * g.config.image_size)
}

/// Draws one image for `report`, seeded by `seed`, into `pixels`
/// (`len` must equal [`cxrl_generator_image_len`]).
///
/// # Safety
/// `gen` must be live, `report` NUL-terminated and `pixels` writable for
/// `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cxrl_generator_sample(
    gen: *const CxrlGenerator,
    report: *const c_char,
    seed: u64,
    pixels: *mut f64,
    len: usize,
) -> c_int {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| Failure(CXRL_ERR_NULL, "generator is null".into()))?;
        if pixels.is_null() {
            return Err(Failure(CXRL_ERR_NULL, "pixels is null".into()));
        }
        let want = g.config.image_size * g.config.image_size;
        if len != want {
            return Err(Failure(CXRL_ERR_BUFFER, format!("buffer holds {len} values, image has {want}")));
        }
        let report = text(report, "report")?;
        let emb = encode_report(&tokenize(report), &g.store).map_err(|e| invalid(e.to_string()))?;
        let (den, sched) = generator_arch(&g.config)?;
        let imgs = generate(&g.store, &den, &sched, g.use_ace, &[&emb], seed, "ffi")?;
        std::ptr::copy_nonoverlapping(imgs[0].pixels().as_ptr(), pixels, want);
        Ok(())
    })
}

/// # Safety
/// `gen` must be null or a handle from [`cxrl_generator_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cxrl_generator_free(gen: *mut CxrlGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Runs the command-line driver with `argv[0..argc]` and returns its exit
/// code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cxrl_run_cli(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty");
        return cxrl::cli::exit::USAGE;
    }
    let mut args = Vec::with_capacity(argc as usize);
    for i in 0..argc as usize {
        match text(*argv.add(i), "argument") {
            Ok(s) => args.push(s.to_string()),
            Err(Failure(_, msg)) => {
                set_error(msg);
                return cxrl::cli::exit::USAGE;
            }
        }
    }
    catch_unwind(|| cxrl::cli::run_cli(args)).unwrap_or(CXRL_ERR_PANIC)
}
