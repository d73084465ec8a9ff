//! C ABI over the molfusion library.
//!
//! Every function returns an [`MfStatus`]. On failure a message describing
//! the error is kept per thread and can be read with
//! [`mf_last_error_message`] until the next successful call clears it.
//! Handles are opaque and must be released with their matching `*_free`
//! function; passing NULL to a `*_free` function is a no-op.

use molfusion::archive::{self, ArchiveError};
use molfusion::chem::{morgan_fingerprint, murcko_scaffold, tanimoto, BitFingerprint};
use molfusion::llm::{LlmClient, ProviderConfig};
use molfusion::molgraph::{parse_smiles, spectral_operator, MoleculeGraph};
use molfusion::pipeline::{PipelineError, TrainedModel};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    BufferTooSmall = 4,
    Io = 5,
    ArchiveError = 6,
    ShapeMismatch = 7,
    ProviderError = 8,
    Internal = 9,
}

/// A parsed molecule.
pub struct MfGraph(MoleculeGraph);

/// A Morgan bit fingerprint.
pub struct MfFingerprint(BitFingerprint);

/// A trained model loaded from an archive.
pub struct MfModel {
    model: TrainedModel,
    client: LlmClient,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(MfStatus, String);

fn fail(status: MfStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `f`, records any error message and converts panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MfStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(fail(MfStatus::Internal, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            MfStatus::Ok
        }
        Err(Failure(status, message)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = message);
            status
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MfStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(MfStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(MfStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(MfStatus::NullPointer, format!("{what} is NULL")))
}

/// Copies `values` into `out` when `capacity` suffices; `*required` (if not
/// NULL) always receives the length.
unsafe fn write_slice<T: Copy>(values: &[T], out: *mut T, capacity: usize, required: *mut usize) -> Result<(), Failure> {
    if let Some(r) = required.as_mut() {
        *r = values.len();
    }
    if capacity < values.len() {
        return Err(fail(
            MfStatus::BufferTooSmall,
            format!("buffer holds {capacity}, need {}", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(fail(MfStatus::NullPointer, "output buffer is NULL"));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Writes `s` plus a terminating NUL.
unsafe fn write_str(s: &str, out: *mut c_char, capacity: usize, required: *mut usize) -> Result<(), Failure> {
    let mut bytes: Vec<c_char> = s.bytes().map(|b| b as c_char).collect();
    bytes.push(0);
    write_slice(&bytes, out, capacity, required)
}

/// Length in bytes of the last error message on this thread, including the
/// terminating NUL. 1 when there is none.
#[no_mangle]
pub extern "C" fn mf_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len() + 1)
}

/// Copies the last error message on this thread into `out` (NUL-terminated).
/// Reading the message does not clear it.
///
/// # Safety
/// `out` must be valid for `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn mf_last_error_message(out: *mut c_char, capacity: usize) -> MfStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, out, capacity, std::ptr::null_mut()) {
        Ok(()) => MfStatus::Ok,
        Err(Failure(status, _)) => status,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a SMILES string.
///
/// # Safety
/// `smiles` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_graph_parse(smiles: *const c_char, out: *mut *mut MfGraph) -> MfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let s = text(smiles, "smiles")?;
        let g = parse_smiles(s).map_err(|e| fail(MfStatus::ParseError, format!("{s:?}: {e}")))?;
        *out = Box::into_raw(Box::new(MfGraph(g)));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`mf_graph_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_graph_free(graph: *mut MfGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Heavy-atom and bond counts.
///
/// # Safety
/// `graph` must be a live handle; `atoms` and `bonds` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_graph_size(graph: *const MfGraph, atoms: *mut usize, bonds: *mut usize) -> MfStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        *out_ptr(atoms, "atoms")? = g.atom_count();
        *out_ptr(bonds, "bonds")? = g.bond_count();
        Ok(())
    })
}

/// The normalized graph operator as an `n x n` row-major matrix.
///
/// # Safety
/// `out` must be valid for `capacity` doubles; `required` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mf_graph_spectral_operator(
    graph: *const MfGraph,
    out: *mut f64,
    capacity: usize,
    required: *mut usize,
) -> MfStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        write_slice(spectral_operator(g).matrix.as_slice(), out, capacity, required)
    })
}

/// Murcko scaffold key, empty for acyclic molecules.
///
/// # Safety
/// `out` must be valid for `capacity` bytes; `required` may be NULL and
/// receives the size including the NUL.
#[no_mangle]
pub unsafe extern "C" fn mf_graph_scaffold(
    graph: *const MfGraph,
    out: *mut c_char,
    capacity: usize,
    required: *mut usize,
) -> MfStatus {
    guard(|| {
        let g = &handle(graph, "graph")?.0;
        write_str(&murcko_scaffold(g).0, out, capacity, required)
    })
}

/// Morgan fingerprint of `graph`.
///
/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_fingerprint_new(
    graph: *const MfGraph,
    radius: u32,
    nbits: usize,
    out: *mut *mut MfFingerprint,
) -> MfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let g = &handle(graph, "graph")?.0;
        let fp = morgan_fingerprint(g, radius, nbits).map_err(|e| fail(MfStatus::ShapeMismatch, e.to_string()))?;
        *out = Box::into_raw(Box::new(MfFingerprint(fp)));
        Ok(())
    })
}

/// # Safety
/// `fp` must come from [`mf_fingerprint_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_fingerprint_free(fp: *mut MfFingerprint) {
    if !fp.is_null() {
        drop(Box::from_raw(fp));
    }
}

/// Number of set bits.
///
/// # Safety
/// `fp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_fingerprint_popcount(fp: *const MfFingerprint, out: *mut usize) -> MfStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(fp, "fingerprint")?.0.popcount();
        Ok(())
    })
}

/// Indices of the set bits in ascending order.
///
/// # Safety
/// `out` must be valid for `capacity` entries; `required` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn mf_fingerprint_bits(
    fp: *const MfFingerprint,
    out: *mut usize,
    capacity: usize,
    required: *mut usize,
) -> MfStatus {
    guard(|| write_slice(&handle(fp, "fingerprint")?.0.set_bits(), out, capacity, required))
}

/// Tanimoto similarity of two fingerprints of equal length.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_tanimoto(a: *const MfFingerprint, b: *const MfFingerprint, out: *mut f64) -> MfStatus {
    guard(|| {
        let (a, b) = (&handle(a, "a")?.0, &handle(b, "b")?.0);
        *out_ptr(out, "out")? = tanimoto(a, b).map_err(|e| fail(MfStatus::ShapeMismatch, e.to_string()))?;
        Ok(())
    })
}

/// Loads a model archive. Predictions query the offline mock provider;
/// `cache_dir` may be NULL to disable the response cache.
///
/// # Safety
/// `path` and (if not NULL) `cache_dir` must be NUL-terminated; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_load(path: *const c_char, cache_dir: *const c_char, out: *mut *mut MfModel) -> MfStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = std::ptr::null_mut();
        let path = text(path, "path")?;
        let cache = if cache_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(cache_dir, "cache_dir")?))
        };
        let model = archive::load(path.as_ref()).map_err(|e| {
            let status = match e {
                ArchiveError::Io { .. } => MfStatus::Io,
                ArchiveError::Mismatch { .. } => MfStatus::ShapeMismatch,
                _ => MfStatus::ArchiveError,
            };
            fail(status, e.to_string())
        })?;
        let client = LlmClient::new(ProviderConfig::default(), cache);
        *out = Box::into_raw(Box::new(MfModel { model, client }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mf_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_model_free(model: *mut MfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of predicted properties.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_model_target_count(model: *const MfModel, out: *mut usize) -> MfStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(model, "model")?.model.target_names.len();
        Ok(())
    })
}

/// Predicts the property vector of one molecule in original units.
///
/// # Safety
/// `smiles` must be NUL-terminated; `out` must be valid for `capacity`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn mf_model_predict(
    model: *const MfModel,
    smiles: *const c_char,
    out: *mut f64,
    capacity: usize,
) -> MfStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = text(smiles, "smiles")?;
        let c = m.model.target_names.len();
        if capacity < c {
            return Err(fail(MfStatus::BufferTooSmall, format!("buffer holds {capacity}, need {c}")));
        }
        let y = m.model.predict_smiles(s, &m.client).map_err(|e| {
            let status = match e {
                PipelineError::InvalidSmiles { .. } => MfStatus::ParseError,
                PipelineError::Provider { .. } => MfStatus::ProviderError,
                _ => MfStatus::Internal,
            };
            fail(status, e.to_string())
        })?;
        write_slice(&y, out, capacity, std::ptr::null_mut())
    })
}
