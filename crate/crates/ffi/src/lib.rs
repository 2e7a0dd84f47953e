//! C ABI over `tcna`: load branch and fusion checkpoints, run inference,
//! count MACs and score predictions.
//!
//! Every fallible call returns a [`TcnaStatus`]. On failure the message is
//! kept per thread and read with [`tcna_last_error_message`]. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use tcna::bench::{lstm_macs, tcn_macs, LstmConfig, MacCount};
use tcna::branch::{required_input_length, Branch, BranchConfig};
use tcna::data::{class_mean_recall, top_k_accuracy, Modality};
use tcna::fusion::FusionModel;
use tcna::train::{branch_from_checkpoint, checkpoint_modality, fusion_from_checkpoint, Checkpoint};
use tcna::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcnaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    Numeric = 7,
    Internal = 8,
}

/// Shape of a loaded branch. `modality` is 0 for rgb, 1 for flow, 2 for obj.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TcnaBranchInfo {
    pub input_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub layers: usize,
    pub receptive_field: usize,
    pub num_actions: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub modality: u8,
}

/// A uni-modal branch loaded from a checkpoint.
pub struct TcnaBranch {
    branch: Branch<f32>,
    modality: Modality,
}

/// A fusion model and its three frozen branches.
pub struct TcnaFusion {
    model: FusionModel<f32>,
}

enum Fail {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

impl Fail {
    fn status(&self) -> TcnaStatus {
        match self {
            Fail::Null(_) => TcnaStatus::NullPointer,
            Fail::Invalid(_) => TcnaStatus::InvalidArgument,
            Fail::Core(e) => match e {
                Error::Shape { .. } | Error::SequenceTooShort { .. } => TcnaStatus::Shape,
                Error::Io { .. } => TcnaStatus::Io,
                Error::Format { .. } => TcnaStatus::Format,
                Error::Checkpoint(_) => TcnaStatus::Checkpoint,
                Error::NonFinite(_) | Error::NonFiniteGradient(_) => TcnaStatus::Numeric,
                Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Dataset(_)
                | Error::Axis { .. }
                | Error::LabelOutOfRange { .. } => TcnaStatus::InvalidArgument,
                _ => TcnaStatus::Internal,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Fail::Null(arg) => format!("null pointer passed for `{arg}`"),
            Fail::Invalid(m) => m.clone(),
            Fail::Core(e) => e.to_string(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TcnaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TcnaStatus::Ok
        }
        Ok(Err(fail)) => {
            set_error(fail.message());
            fail.status()
        }
        Err(_) => {
            set_error("internal panic".into());
            TcnaStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or(Fail::Null(name))
}

unsafe fn input<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn output<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Invalid("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

/// `[batch][snippets][dim]` time-major features to a `[batch, dim, snippets]` tensor.
fn channels_first(data: &[f32], batch: usize, snippets: usize, dim: usize) -> Result<Tensor<f32>, Fail> {
    if batch == 0 || snippets == 0 {
        return Err(Fail::Invalid("batch and snippets must be positive".into()));
    }
    let mut out = vec![0.0f32; data.len()];
    for b in 0..batch {
        for t in 0..snippets {
            for c in 0..dim {
                out[(b * dim + c) * snippets + t] = data[(b * snippets + t) * dim + c];
            }
        }
    }
    Ok(Tensor::new(vec![batch, dim, snippets], out)?)
}

unsafe fn write_scores(scores: &[Tensor<f32>; 3], outs: [*mut f32; 3]) -> Result<(), Fail> {
    for ((t, p), name) in scores.iter().zip(outs).zip(["out_action", "out_verb", "out_noun"]) {
        unsafe { output(p, t.data().len(), name) }?.copy_from_slice(t.data());
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next `tcna_*` call on the same thread.
#[no_mangle]
pub extern "C" fn tcna_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn tcna_status_name(status: TcnaStatus) -> *const c_char {
    let s: &'static CStr = match status {
        TcnaStatus::Ok => c"ok",
        TcnaStatus::NullPointer => c"null pointer",
        TcnaStatus::InvalidArgument => c"invalid argument",
        TcnaStatus::Shape => c"shape mismatch",
        TcnaStatus::Io => c"i/o error",
        TcnaStatus::Format => c"malformed file",
        TcnaStatus::Checkpoint => c"bad checkpoint",
        TcnaStatus::Numeric => c"non-finite value",
        TcnaStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

/// Receptive field `1 + (kernel - 1) * sum(dilations)`.
///
/// # Safety
/// `dilations` must point to `len` values, or be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn tcna_required_input_length(kernel: usize, dilations: *const usize, len: usize) -> usize {
    match unsafe { input(dilations, len, "dilations") } {
        Ok(d) => required_input_length(kernel, d),
        Err(_) => 0,
    }
}

unsafe fn write_macs(count: MacCount, sequence: *mut u64, heads: *mut u64) -> Result<(), Fail> {
    unsafe { output(sequence, 1, "out_sequence") }?[0] = count.sequence;
    unsafe { output(heads, 1, "out_heads") }?[0] = count.heads;
    Ok(())
}

/// Analytic per-sample MACs of a TCN branch over `snippets` inputs.
///
/// # Safety
/// `dilations` must point to `num_dilations` values and both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcna_tcn_macs(
    input_dim: usize,
    channels: usize,
    kernel: usize,
    dilations: *const usize,
    num_dilations: usize,
    classes: *const usize,
    snippets: usize,
    out_sequence: *mut u64,
    out_heads: *mut u64,
) -> TcnaStatus {
    guard(|| {
        let d = unsafe { input(dilations, num_dilations, "dilations") }?;
        let c = unsafe { input(classes, 3, "classes") }?;
        let config = BranchConfig {
            channels,
            kernel,
            dilations: d.to_vec(),
            ..BranchConfig::new(input_dim, c[0], c[1], c[2])
        };
        config.validate()?;
        unsafe { write_macs(tcn_macs(&config, snippets)?, out_sequence, out_heads) }
    })
}

/// Analytic per-sample MACs of the encoder-decoder LSTM baseline.
///
/// # Safety
/// Both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tcna_lstm_macs(
    input_dim: usize,
    hidden: usize,
    decoder_steps: usize,
    num_classes: usize,
    snippets: usize,
    out_sequence: *mut u64,
    out_heads: *mut u64,
) -> TcnaStatus {
    guard(|| {
        let config = LstmConfig {
            decoder_steps,
            ..LstmConfig::new(input_dim, hidden, num_classes)
        };
        unsafe { write_macs(lstm_macs(&config, snippets), out_sequence, out_heads) }
    })
}

/// Loads a branch checkpoint written by `tcna train-branch`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcna_branch_load(path: *const c_char, out: *mut *mut TcnaBranch) -> TcnaStatus {
    guard(|| {
        let slot = unsafe { output(out, 1, "out") }?;
        slot[0] = ptr::null_mut();
        let ck = Checkpoint::load(unsafe { path_arg(path) }?)?;
        let handle = TcnaBranch {
            branch: branch_from_checkpoint(&ck)?,
            modality: checkpoint_modality(&ck)?,
        };
        slot[0] = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a branch handle; null is ignored.
///
/// # Safety
/// `branch` must come from `tcna_branch_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tcna_branch_free(branch: *mut TcnaBranch) {
    if !branch.is_null() {
        drop(unsafe { Box::from_raw(branch) });
    }
}

/// # Safety
/// `branch` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcna_branch_info(branch: *const TcnaBranch, out: *mut TcnaBranchInfo) -> TcnaStatus {
    guard(|| {
        let h = non_null(branch, "branch")?;
        let c = h.branch.config();
        unsafe { output(out, 1, "out") }?[0] = TcnaBranchInfo {
            input_dim: c.input_dim,
            channels: c.channels,
            kernel: c.kernel,
            layers: c.num_layers(),
            receptive_field: c.required_input_length(),
            num_actions: c.num_actions,
            num_verbs: c.num_verbs,
            num_nouns: c.num_nouns,
            modality: h.modality.code(),
        };
        Ok(())
    })
}

/// Eval-mode logits for `batch` windows laid out `[batch][snippets][input_dim]`.
/// Outputs are `[batch][classes]` for the action, verb and noun heads.
///
/// # Safety
/// `features` must hold `batch * snippets * input_dim` floats and each
/// output `batch * classes` floats for its head.
#[no_mangle]
pub unsafe extern "C" fn tcna_branch_predict(
    branch: *const TcnaBranch,
    features: *const f32,
    batch: usize,
    snippets: usize,
    out_action: *mut f32,
    out_verb: *mut f32,
    out_noun: *mut f32,
) -> TcnaStatus {
    guard(|| {
        let h = non_null(branch, "branch")?;
        let d = h.branch.config().input_dim;
        let x = unsafe { input(features, batch * snippets * d, "features") }?;
        let out = h.branch.infer(&channels_first(x, batch, snippets, d)?)?;
        unsafe { write_scores(&[out.action, out.verb, out.noun], [out_action, out_verb, out_noun]) }
    })
}

/// Loads a fusion checkpoint written by `tcna train-fusion`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tcna_fusion_load(path: *const c_char, out: *mut *mut TcnaFusion) -> TcnaStatus {
    guard(|| {
        let slot = unsafe { output(out, 1, "out") }?;
        slot[0] = ptr::null_mut();
        let ck = Checkpoint::load(unsafe { path_arg(path) }?)?;
        let handle = TcnaFusion {
            model: fusion_from_checkpoint(&ck)?,
        };
        slot[0] = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a fusion handle; null is ignored.
///
/// # Safety
/// `fusion` must come from `tcna_fusion_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tcna_fusion_free(fusion: *mut TcnaFusion) {
    if !fusion.is_null() {
        drop(unsafe { Box::from_raw(fusion) });
    }
}

/// Shape of the rgb, flow and obj branches inside a fusion model.
///
/// # Safety
/// `fusion` must be a live handle and `out` must hold three records.
#[no_mangle]
pub unsafe extern "C" fn tcna_fusion_branch_info(fusion: *const TcnaFusion, out: *mut TcnaBranchInfo) -> TcnaStatus {
    guard(|| {
        let h = non_null(fusion, "fusion")?;
        let slots = unsafe { output(out, 3, "out") }?;
        for ((slot, b), m) in slots.iter_mut().zip(h.model.branches()).zip(Modality::ALL) {
            let c = b.config();
            *slot = TcnaBranchInfo {
                input_dim: c.input_dim,
                channels: c.channels,
                kernel: c.kernel,
                layers: c.num_layers(),
                receptive_field: c.required_input_length(),
                num_actions: c.num_actions,
                num_verbs: c.num_verbs,
                num_nouns: c.num_nouns,
                modality: m.code(),
            };
        }
        Ok(())
    })
}

/// Fused action, verb and noun probabilities, `[batch][classes]` each.
/// Inputs are `[batch][snippets][dim]` per modality.
///
/// # Safety
/// Each input must hold `batch * snippets * dim` floats for its modality
/// and each output `batch * classes` floats for its head.
#[no_mangle]
pub unsafe extern "C" fn tcna_fusion_predict(
    fusion: *const TcnaFusion,
    rgb: *const f32,
    flow: *const f32,
    obj: *const f32,
    batch: usize,
    snippets: usize,
    out_action: *mut f32,
    out_verb: *mut f32,
    out_noun: *mut f32,
) -> TcnaStatus {
    guard(|| {
        let h = non_null(fusion, "fusion")?;
        let mut xs = Vec::with_capacity(3);
        for ((p, b), name) in [rgb, flow, obj].into_iter().zip(h.model.branches()).zip(["rgb", "flow", "obj"]) {
            let d = b.config().input_dim;
            let x = unsafe { input(p, batch * snippets * d, name) }?;
            xs.push(channels_first(x, batch, snippets, d)?);
        }
        let probs = h.model.infer([&xs[0], &xs[1], &xs[2]])?.probabilities()?;
        unsafe { write_scores(&probs, [out_action, out_verb, out_noun]) }
    })
}

unsafe fn metric_inputs(scores: *const f32, batch: usize, classes: usize, labels: *const usize) -> Result<(Tensor<f32>, Vec<usize>), Fail> {
    let s = unsafe { input(scores, batch * classes, "scores") }?;
    let l = unsafe { input(labels, batch, "labels") }?;
    Ok((Tensor::new(vec![batch, classes], s.to_vec())?, l.to_vec()))
}

/// Fraction of rows whose label is among the `k` highest scores.
///
/// # Safety
/// `scores` must hold `batch * classes` floats, `labels` `batch` values.
#[no_mangle]
pub unsafe extern "C" fn tcna_top_k_accuracy(
    scores: *const f32,
    batch: usize,
    classes: usize,
    labels: *const usize,
    k: usize,
    out: *mut f64,
) -> TcnaStatus {
    guard(|| {
        let (s, l) = unsafe { metric_inputs(scores, batch, classes, labels) }?;
        unsafe { output(out, 1, "out") }?[0] = top_k_accuracy(&s, &l, k)?;
        Ok(())
    })
}

/// Per-class top-`k` recall averaged over the classes present in `labels`.
///
/// # Safety
/// `scores` must hold `batch * classes` floats, `labels` `batch` values.
#[no_mangle]
pub unsafe extern "C" fn tcna_class_mean_recall(
    scores: *const f32,
    batch: usize,
    classes: usize,
    labels: *const usize,
    k: usize,
    out: *mut f64,
) -> TcnaStatus {
    guard(|| {
        let (s, l) = unsafe { metric_inputs(scores, batch, classes, labels) }?;
        unsafe { output(out, 1, "out") }?[0] = class_mean_recall(&s, &l, k)?;
        Ok(())
    })
}
