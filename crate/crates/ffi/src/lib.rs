//! C ABI over `ggm-core`.
//!
//! Handles are opaque pointers created by `*_load` / `*_from_json` and released with the
//! matching `*_free`. Every fallible call returns a [`GgmStatus`]; on failure the message is
//! available from [`ggm_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ggm_core::checkpoint::Checkpoint;
use ggm_core::cli::{self, CliConfig, SplitName};
use ggm_core::concepts::ConceptVocabulary;
use ggm_core::dataset::{generate_dataset, SyntheticSplit};
use ggm_core::numerics::Matrix;
use ggm_core::trainer::{self, Mode, TrainConfig};
use ggm_core::vqa::EmbeddingTable;
use ggm_core::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GgmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Json = 5,
    Dimension = 6,
    Parameter = 7,
    Index = 8,
    Contract = 9,
    Numeric = 10,
    BufferTooSmall = 11,
    GradcheckFailed = 12,
    Panic = 13,
}

/// Training mode selector for [`ggm_train`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GgmMode {
    Baseline = 0,
    Xggm = 1,
}

/// Example split selector.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GgmSplit {
    Train = 0,
    IdTest = 1,
    OodTest = 2,
}

/// Opaque run configuration.
pub struct GgmConfig {
    inner: CliConfig,
}

/// Opaque trained model: checkpoint parameters plus the regenerated dataset.
pub struct GgmModel {
    ckpt: Checkpoint<CliConfig>,
    train_cfg: TrainConfig,
    vocab: ConceptVocabulary,
    table: EmbeddingTable,
    data: SyntheticSplit,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(GgmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => GgmStatus::Dimension,
            Error::Parameter(_) => GgmStatus::Parameter,
            Error::Index(_) => GgmStatus::Index,
            Error::Contract(_) => GgmStatus::Contract,
            Error::Numeric(_) => GgmStatus::Numeric,
            Error::Config(_) => GgmStatus::Config,
            Error::Io(_) => GgmStatus::Io,
            Error::Json(_) => GgmStatus::Json,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GgmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            GgmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            GgmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GgmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(GgmStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_out<T>(p: *mut T, v: T) {
    if !p.is_null() {
        *p = v;
    }
}

fn split_name(s: GgmSplit) -> SplitName {
    match s {
        GgmSplit::Train => SplitName::Train,
        GgmSplit::IdTest => SplitName::IdTest,
        GgmSplit::OodTest => SplitName::OodTest,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ggm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ggm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parses a JSON config. Missing keys take their defaults; unknown keys are rejected.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ggm_config_from_json(json: *const c_char, out: *mut *mut GgmConfig) -> GgmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = CliConfig::from_json(str_arg(json, "json")?)?;
        inner.validate()?;
        *out = Box::into_raw(Box::new(GgmConfig { inner }));
        Ok(())
    })
}

/// Loads a JSON config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ggm_config_load(path: *const c_char, out: *mut *mut GgmConfig) -> GgmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = CliConfig::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(GgmConfig { inner }));
        Ok(())
    })
}

/// Overrides the output directory.
///
/// # Safety
/// `cfg` must come from this library and `dir` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ggm_config_set_output_dir(cfg: *mut GgmConfig, dir: *const c_char) -> GgmStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.inner.output_dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a pointer from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn ggm_config_free(cfg: *mut GgmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the dataset under `<output_dir>/data`.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ggm_gen_data(cfg: *const GgmConfig) -> GgmStatus {
    guard(|| {
        cli::cmd_gen_data(&ref_arg(cfg, "cfg")?.inner)?;
        Ok(())
    })
}

/// Trains every configured seed in `mode` and writes the run directory.
/// Seed-mean ID and OOD accuracies go to the optional out pointers.
///
/// # Safety
/// `cfg` must come from this library; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ggm_train(
    cfg: *const GgmConfig,
    mode: GgmMode,
    out_id_all: *mut f64,
    out_ood_all: *mut f64,
) -> GgmStatus {
    guard(|| {
        let mut c = ref_arg(cfg, "cfg")?.inner.clone();
        c.mode = match mode {
            GgmMode::Baseline => Mode::Baseline,
            GgmMode::Xggm => Mode::Xggm,
        };
        let report = cli::cmd_train(&c)?;
        let mean = |k: &str| report.aggregate.mean.get(k).copied().unwrap_or(f64::NAN);
        write_out(out_id_all, mean("id_all"));
        write_out(out_ood_all, mean("ood_all"));
        Ok(())
    })
}

/// Runs the gradient suite. Returns `GradcheckFailed` if any check exceeds its threshold.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ggm_gradcheck(cfg: *const GgmConfig) -> GgmStatus {
    guard(|| {
        let report = cli::cmd_gradcheck(&ref_arg(cfg, "cfg")?.inner, None)?;
        if report.passed {
            Ok(())
        } else {
            Err(Failure(GgmStatus::GradcheckFailed, cli::gradcheck_text(&report)))
        }
    })
}

/// Runs the η sweep and writes `<output_dir>/sweep`. The std of OOD accuracy goes to `out_ood_std`.
///
/// # Safety
/// `cfg` must come from this library; `out_ood_std` may be null.
#[no_mangle]
pub unsafe extern "C" fn ggm_sweep(cfg: *const GgmConfig, out_ood_std: *mut f64) -> GgmStatus {
    guard(|| {
        let report = cli::cmd_sweep(&ref_arg(cfg, "cfg")?.inner)?;
        write_out(out_ood_std, report.ood_all_std);
        Ok(())
    })
}

/// Writes `<prefix>_gt.csv`, `_gt.pgm`, `_gen.csv` and `_gen.pgm` for one example.
///
/// # Safety
/// `checkpoint` and `out_prefix` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ggm_export_heatmap(
    checkpoint: *const c_char,
    split: GgmSplit,
    index: usize,
    out_prefix: *const c_char,
) -> GgmStatus {
    guard(|| {
        let ckpt = PathBuf::from(str_arg(checkpoint, "checkpoint")?);
        let prefix = PathBuf::from(str_arg(out_prefix, "out_prefix")?);
        cli::cmd_export_heatmap(&ckpt, split_name(split), index, &prefix)?;
        Ok(())
    })
}

/// Loads a checkpoint and regenerates the dataset it was trained on.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ggm_model_load(path: *const c_char, out: *mut *mut GgmModel) -> GgmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::<CliConfig>::load(&PathBuf::from(str_arg(path, "path")?))?;
        ckpt.config.validate()?;
        let data = generate_dataset(&ckpt.config.dataset())?;
        let vocab = ckpt.config.vocab();
        let table = EmbeddingTable::new(&vocab)?;
        let train_cfg = ckpt.config.train(ckpt.seed);
        *out = Box::into_raw(Box::new(GgmModel { ckpt, train_cfg, vocab, table, data }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a pointer from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn ggm_model_free(model: *mut GgmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Objects per scene, i.e. the side of the relation matrices.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ggm_model_n_objects(model: *const GgmModel) -> usize {
    model.as_ref().map_or(0, |m| m.train_cfg.n_objects)
}

/// Number of examples in `split`.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn ggm_model_split_len(model: *const GgmModel, split: GgmSplit) -> usize {
    model.as_ref().map_or(0, |m| examples(m, split).len())
}

fn examples(m: &GgmModel, split: GgmSplit) -> &[ggm_core::vqa::VqaExample] {
    match split {
        GgmSplit::Train => &m.data.train,
        GgmSplit::IdTest => &m.data.id_test,
        GgmSplit::OodTest => &m.data.ood_test,
    }
}

fn prepared(m: &GgmModel, split: GgmSplit, index: usize) -> Result<trainer::PreparedExample, Failure> {
    let list = examples(m, split);
    let ex = list
        .get(index)
        .ok_or_else(|| Error::Index(format!("example index {index} out of range for a split of {}", list.len())))?;
    let mut p = trainer::prepare(std::slice::from_ref(ex), &m.vocab, &m.table, m.train_cfg.kl_bins)?;
    Ok(p.remove(0))
}

/// Predicted answer and ground-truth answer for one example.
///
/// # Safety
/// `model` must come from this library; out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ggm_model_predict(
    model: *const GgmModel,
    split: GgmSplit,
    index: usize,
    out_pred: *mut usize,
    out_answer: *mut usize,
) -> GgmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ex = prepared(m, split, index)?;
        let pred = trainer::predict(&m.ckpt.params, &m.train_cfg, &ex)?;
        write_out(out_pred, pred);
        write_out(out_answer, examples(m, split)[index].answer);
        Ok(())
    })
}

/// Copies `R_GT` and the generated relation matrix, row-major, into buffers of `len`
/// entries each. `len` must be at least `n_objects²`.
///
/// # Safety
/// `gt` and `gen` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ggm_model_relations(
    model: *const GgmModel,
    split: GgmSplit,
    index: usize,
    gt: *mut f64,
    gen: *mut f64,
    len: usize,
) -> GgmStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if gt.is_null() || gen.is_null() {
            return Err(null("output buffer"));
        }
        let n = m.train_cfg.n_objects;
        if len < n * n {
            return Err(Failure(GgmStatus::BufferTooSmall, format!("need {} entries, got {len}", n * n)));
        }
        let ex = prepared(m, split, index)?;
        let (g, r) = trainer::relation_pair(&m.ckpt.params, &m.train_cfg, &ex)?;
        let copy = |src: &Matrix, dst: *mut f64| std::slice::from_raw_parts_mut(dst, n * n).copy_from_slice(src.data());
        copy(&g, gt);
        copy(&r, gen);
        Ok(())
    })
}

