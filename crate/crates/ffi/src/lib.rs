//! C interface to the planner: scenario generation, teacher simulation,
//! student inference and trajectory selection.
//!
//! Objects cross the boundary as opaque handles created by `hp_*_load` or
//! `hp_*_generate` and released with the matching `hp_*_free`.
//! Every fallible call returns an [`HpStatus`]; on failure the message is
//! available from [`hp_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hydra_plan::infer::{select_index, CostWeights};
use hydra_plan::metrics::{pdm_score, simulate_vocabulary, MetricConfig, SubScores, NUM_METRICS};
use hydra_plan::model::{load_checkpoint, HeadLayout, PredictionBundle, StudentModel};
use hydra_plan::vocab::Vocabulary;
use hydra_plan::world::{generate_scenario, render_observation, NoiseConfig, Observation, Scenario, WorldConfig};
use hydra_plan::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    NonFinite = 5,
    Integrity = 6,
    Format = 7,
    Io = 8,
    Panic = 9,
}

/// Generated driving scenario.
pub struct HpScenario(Scenario);

/// Planning vocabulary.
pub struct HpVocabulary(Vocabulary);

/// Trained student network.
pub struct HpModel(StudentModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HpStatus {
    match e {
        Error::Config(_) => HpStatus::Config,
        Error::Shape(_) => HpStatus::Shape,
        Error::NonFinite { .. } => HpStatus::NonFinite,
        Error::Integrity(_) => HpStatus::Integrity,
        Error::Format { .. } | Error::Json(_) => HpStatus::Format,
        Error::Io { .. } => HpStatus::Io,
        Error::Stage { source, .. } => status_of(source),
    }
}

struct Fail(HpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HpStatus::InvalidArgument, msg.into())
}

/// Run `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            HpStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(HpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail(HpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail(HpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(HpStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(HpStatus::NullPointer, "output handle pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library; valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Number of sub-metrics per vocabulary entry: NC, DAC, TTC, C, EP.
#[no_mangle]
pub extern "C" fn hp_num_metrics() -> usize {
    NUM_METRICS
}

/// Generate a scenario with the default world settings.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn hp_scenario_generate(seed: u64, out: *mut *mut HpScenario) -> HpStatus {
    guard(|| {
        let s = generate_scenario(seed, &WorldConfig::default())?;
        put(out, HpScenario(s))
    })
}

/// # Safety
/// `scenario` must be null or a handle from `hp_scenario_generate`.
#[no_mangle]
pub unsafe extern "C" fn hp_scenario_free(scenario: *mut HpScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Scenario as a JSON document. Release the string with `hp_string_free`.
///
/// # Safety
/// `scenario` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_scenario_to_json(scenario: *const HpScenario, out: *mut *mut c_char) -> HpStatus {
    guard(|| {
        let s = deref(scenario, "scenario")?;
        if out.is_null() {
            return Err(Fail(HpStatus::NullPointer, "out is null".into()));
        }
        let text = serde_json::to_string(&s.0).map_err(Error::from)?;
        *out = CString::new(text).map_err(|_| invalid("JSON contains NUL"))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn hp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Render the noisy bird's-eye observation of a scenario with default noise
/// settings. `raster` receives `2 × grid × grid` values (channel-major),
/// `ego_status` four values (speed, yaw rate, acceleration, lateral offset).
///
/// # Safety
/// `raster` must hold `raster_len` doubles and `ego_status` four.
#[no_mangle]
pub unsafe extern "C" fn hp_observation_render(
    scenario: *const HpScenario,
    seed: u64,
    raster: *mut f64,
    raster_len: usize,
    ego_status: *mut f64,
) -> HpStatus {
    guard(|| {
        let s = deref(scenario, "scenario")?;
        let obs = render_observation(&s.0, &NoiseConfig::default(), seed);
        if raster_len != obs.bev_raster.len() {
            return Err(invalid(format!("raster needs {} values, got {raster_len}", obs.bev_raster.len())));
        }
        slice_mut(raster, raster_len, "raster")?.copy_from_slice(&obs.bev_raster);
        slice_mut(ego_status, 4, "ego_status")?.copy_from_slice(&obs.ego_status);
        Ok(())
    })
}

/// Raster length produced by `hp_observation_render` (default grid).
#[no_mangle]
pub extern "C" fn hp_observation_raster_len() -> usize {
    let g = NoiseConfig::default().grid_size;
    Observation::CHANNELS * g * g
}

/// Load a vocabulary file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_vocabulary_load(path: *const c_char, out: *mut *mut HpVocabulary) -> HpStatus {
    guard(|| {
        let v = Vocabulary::load(&path_arg(path)?)?;
        put(out, HpVocabulary(v))
    })
}

/// # Safety
/// `vocab` must be null or a handle from `hp_vocabulary_load`.
#[no_mangle]
pub unsafe extern "C" fn hp_vocabulary_free(vocab: *mut HpVocabulary) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of entries, or 0 for a null handle.
///
/// # Safety
/// `vocab` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_vocabulary_len(vocab: *const HpVocabulary) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// Poses `(x, y, heading)` of entry `index` in the ego frame, `3 × horizon`
/// values.
///
/// # Safety
/// `poses` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hp_vocabulary_entry(
    vocab: *const HpVocabulary,
    index: usize,
    poses: *mut f64,
    len: usize,
) -> HpStatus {
    guard(|| {
        let v = &deref(vocab, "vocab")?.0;
        if index >= v.len() {
            return Err(invalid(format!("entry {index} out of range for k={}", v.len())));
        }
        let t = v.get(index);
        if len != 3 * t.len() {
            return Err(invalid(format!("entry has {} poses, buffer holds {len} values", t.len())));
        }
        let out = slice_mut(poses, len, "poses")?;
        for (chunk, p) in out.chunks_mut(3).zip(&t.poses) {
            chunk.copy_from_slice(&[p.x, p.y, p.heading]);
        }
        Ok(())
    })
}

/// Teacher sub-scores of every vocabulary entry in a scenario, row-major
/// `k × 5` in the order NC, DAC, TTC, C, EP.
///
/// # Safety
/// `scores` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hp_simulate(
    scenario: *const HpScenario,
    vocab: *const HpVocabulary,
    scores: *mut f64,
    len: usize,
) -> HpStatus {
    guard(|| {
        let s = &deref(scenario, "scenario")?.0;
        let v = &deref(vocab, "vocab")?.0;
        if len != v.len() * NUM_METRICS {
            return Err(invalid(format!("scores needs {} values, got {len}", v.len() * NUM_METRICS)));
        }
        let labels = simulate_vocabulary(s, v, &MetricConfig::default());
        let out = slice_mut(scores, len, "scores")?;
        for (row, sub) in out.chunks_mut(NUM_METRICS).zip(&labels.scores) {
            row.copy_from_slice(&sub.to_array());
        }
        Ok(())
    })
}

/// Aggregate score `nc · dac · (5 ttc + 2 c + 5 ep) / 12` of one sub-score
/// row (NC, DAC, TTC, C, EP).
///
/// # Safety
/// `sub` must hold five doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_pdm_score(sub: *const f64, out: *mut f64) -> HpStatus {
    guard(|| {
        let s = slice(sub, NUM_METRICS, "sub")?;
        let mut a = [0.0; NUM_METRICS];
        a.copy_from_slice(s);
        let scores = SubScores::from_array(a);
        if !scores.is_valid() {
            return Err(invalid("sub-scores must be binary except EP in [0, 1]"));
        }
        *slice_mut(out, 1, "out")?.first_mut().unwrap() = pdm_score(&scores);
        Ok(())
    })
}

/// Load a student checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_model_load(path: *const c_char, out: *mut *mut HpModel) -> HpStatus {
    guard(|| {
        let c = load_checkpoint(&path_arg(path)?)?;
        put(out, HpModel(c.model))
    })
}

/// # Safety
/// `model` must be null or a handle from `hp_model_load`.
#[no_mangle]
pub unsafe extern "C" fn hp_model_free(model: *mut HpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of metric heads (5 for multi-target students, 1 for PDM-only).
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_model_num_heads(model: *const HpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.heads.num_heads())
}

/// Score every vocabulary entry. `imitation` receives `k` probabilities,
/// `metric_scores` `k × num_heads` values.
///
/// # Safety
/// Buffers must hold the stated number of doubles; `ego_status` four.
#[no_mangle]
pub unsafe extern "C" fn hp_model_forward(
    model: *const HpModel,
    vocab: *const HpVocabulary,
    raster: *const f64,
    raster_len: usize,
    ego_status: *const f64,
    imitation: *mut f64,
    k: usize,
    metric_scores: *mut f64,
    metric_len: usize,
) -> HpStatus {
    guard(|| {
        let m = &deref(model, "model")?.0;
        let v = &deref(vocab, "vocab")?.0;
        let g = m.config.grid_size;
        let mut ego = [0.0; 4];
        ego.copy_from_slice(slice(ego_status, 4, "ego_status")?);
        let obs = Observation {
            grid_size: g,
            cell_size: NoiseConfig::default().cell_size,
            bev_raster: slice(raster, raster_len, "raster")?.to_vec(),
            ego_status: ego,
        };
        let b = m.forward(&obs, v)?;
        if k != b.k() || metric_len != b.metric_scores.len() {
            return Err(invalid(format!(
                "output buffers sized {k}/{metric_len}, model produces {}/{}",
                b.k(),
                b.metric_scores.len()
            )));
        }
        slice_mut(imitation, k, "imitation")?.copy_from_slice(&b.imitation);
        slice_mut(metric_scores, metric_len, "metric_scores")?.copy_from_slice(&b.metric_scores);
        Ok(())
    })
}

/// Index minimising the assembled cost; lowest index wins ties.
/// `num_heads` is 5 or 1; `weights` holds w1..w4.
///
/// # Safety
/// `imitation` must hold `k` doubles, `metric_scores` `k × num_heads`,
/// `weights` four; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_select(
    imitation: *const f64,
    metric_scores: *const f64,
    k: usize,
    num_heads: usize,
    weights: *const f64,
    out_index: *mut usize,
) -> HpStatus {
    guard(|| {
        if k == 0 || (num_heads != NUM_METRICS && num_heads != 1) {
            return Err(invalid("need k > 0 and 5 or 1 heads"));
        }
        let w = slice(weights, 4, "weights")?;
        let w = CostWeights::from_array([w[0], w[1], w[2], w[3]]);
        w.validate()?;
        let bundle = PredictionBundle {
            imitation: slice(imitation, k, "imitation")?.to_vec(),
            metric_scores: slice(metric_scores, k * num_heads, "metric_scores")?.to_vec(),
            heads: if num_heads == 1 { HeadLayout::PdmOnly } else { HeadLayout::MultiTarget },
        };
        if !bundle.is_valid() {
            return Err(invalid("imitation must be a distribution and metric scores lie in (0, 1)"));
        }
        *slice_mut(out_index, 1, "out_index")?.first_mut().unwrap() = select_index(&bundle, &w);
        Ok(())
    })
}
