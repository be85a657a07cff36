//! C ABI over the `cbtm` library.
//!
//! Every fallible function returns a [`CbtmStatus`]. On failure the message
//! is kept per thread and can be read with [`cbtm_last_error`]. Objects are
//! handed out as opaque pointers and must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cbtm::btm::{ExpertCollection, RunManifest};
use cbtm::budget::{self, CostPoint, FlopSpec};
use cbtm::cluster::ClusterModel;
use cbtm::corpus::{load_corpus, pack_documents};
use cbtm::embed::EmbedPipeline;
use cbtm::route::{ensemble_weights, eval_ensemble_ppl, CachePolicy};
use cbtm::{Error, ErrorCategory};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbtmStatus {
    Ok = 0,
    /// A null pointer, bad UTF-8 or a buffer of the wrong length.
    InvalidArgument = 1,
    Validation = 2,
    Runtime = 3,
    Integrity = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbtmPolicy {
    PerToken = 0,
    FreezeHalf = 1,
}

impl From<CbtmPolicy> for CachePolicy {
    fn from(p: CbtmPolicy) -> Self {
        match p {
            CbtmPolicy::PerToken => CachePolicy::PerToken,
            CbtmPolicy::FreezeHalf => CachePolicy::FreezeHalf,
        }
    }
}

pub struct CbtmPipeline(EmbedPipeline);

pub struct CbtmClusters(ClusterModel);

pub struct CbtmCollection {
    inner: ExpertCollection,
    seq_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CbtmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.category() {
            ErrorCategory::Validation => CbtmStatus::Validation,
            ErrorCategory::Runtime => CbtmStatus::Runtime,
            ErrorCategory::Integrity => CbtmStatus::Integrity,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CbtmStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CbtmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CbtmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CbtmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    str_arg(p, name).map(PathBuf::from)
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, want: usize, name: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    if len != want {
        return Err(invalid(format!("{name} has length {len}, expected {want}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write_out<T>(p: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    *p = value;
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cbtm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cbtm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Embedding pipeline
// ---------------------------------------------------------------------------

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbtm_pipeline_load(path: *const c_char, out: *mut *mut CbtmPipeline) -> CbtmStatus {
    guard(|| {
        let p = EmbedPipeline::load(&path_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(CbtmPipeline(p))), "out")
    })
}

/// # Safety
/// `pipeline` must come from [`cbtm_pipeline_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn cbtm_pipeline_dim(pipeline: *const CbtmPipeline) -> usize {
    pipeline.as_ref().map_or(0, |p| p.0.dim())
}

/// Embeds `text` into `out`, which must hold exactly `dim` values.
///
/// # Safety
/// Pointers must be valid; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cbtm_pipeline_embed(
    pipeline: *const CbtmPipeline,
    text: *const c_char,
    out: *mut f64,
    len: usize,
) -> CbtmStatus {
    guard(|| {
        let p = handle(pipeline, "pipeline")?;
        let text = str_arg(text, "text")?;
        let dst = out_slice(out, len, p.0.dim(), "out")?;
        dst.copy_from_slice(&p.0.embed_document(text));
        Ok(())
    })
}

/// # Safety
/// `pipeline` must come from [`cbtm_pipeline_load`] or be null, and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cbtm_pipeline_free(pipeline: *mut CbtmPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

// ---------------------------------------------------------------------------
// Cluster model
// ---------------------------------------------------------------------------

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbtm_clusters_load(path: *const c_char, out: *mut *mut CbtmClusters) -> CbtmStatus {
    guard(|| {
        let c = ClusterModel::load(&path_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(CbtmClusters(c))), "out")
    })
}

/// # Safety
/// `clusters` must come from [`cbtm_clusters_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn cbtm_clusters_k(clusters: *const CbtmClusters) -> usize {
    clusters.as_ref().map_or(0, |c| c.0.k)
}

/// # Safety
/// `clusters` must come from [`cbtm_clusters_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn cbtm_clusters_dim(clusters: *const CbtmClusters) -> usize {
    clusters.as_ref().map_or(0, |c| c.0.dim)
}

/// Nearest-center cluster of each of `n_docs` row-major embeddings.
///
/// # Safety
/// `embeddings` must hold `n_docs * dim` doubles and `out` `n_docs` slots.
#[no_mangle]
pub unsafe extern "C" fn cbtm_clusters_greedy_assign(
    clusters: *const CbtmClusters,
    embeddings: *const f64,
    n_docs: usize,
    dim: usize,
    out: *mut usize,
) -> CbtmStatus {
    guard(|| {
        let c = handle(clusters, "clusters")?;
        if embeddings.is_null() || out.is_null() {
            return Err(invalid("embeddings and out must not be null"));
        }
        if dim != c.0.dim {
            return Err(invalid(format!("dimension {dim} differs from the model's {}", c.0.dim)));
        }
        let flat = std::slice::from_raw_parts(embeddings, n_docs * dim);
        let rows: Vec<Vec<f64>> = flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        let a = c.0.predict(&rows)?;
        std::slice::from_raw_parts_mut(out, n_docs).copy_from_slice(&a.clusters);
        Ok(())
    })
}

/// Ensemble weights of one embedding; `out` must hold exactly K values.
///
/// # Safety
/// `embedding` must hold `dim` doubles and `out` `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cbtm_clusters_ensemble_weights(
    clusters: *const CbtmClusters,
    embedding: *const f64,
    dim: usize,
    temperature: f64,
    k_active: usize,
    out: *mut f64,
    len: usize,
) -> CbtmStatus {
    guard(|| {
        let c = handle(clusters, "clusters")?;
        if embedding.is_null() {
            return Err(invalid("embedding is null"));
        }
        let emb = std::slice::from_raw_parts(embedding, dim);
        let dst = out_slice(out, len, c.0.k, "out")?;
        let w = ensemble_weights(emb, &c.0.centers, temperature, k_active)?;
        dst.copy_from_slice(&w.probs);
        Ok(())
    })
}

/// # Safety
/// `clusters` must come from [`cbtm_clusters_load`] or be null, and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cbtm_clusters_free(clusters: *mut CbtmClusters) {
    if !clusters.is_null() {
        drop(Box::from_raw(clusters));
    }
}

// ---------------------------------------------------------------------------
// Expert collection
// ---------------------------------------------------------------------------

/// Opens a finished run directory, verifying every digest.
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbtm_collection_open(run_dir: *const c_char, out: *mut *mut CbtmCollection) -> CbtmStatus {
    guard(|| {
        let dir = path_arg(run_dir, "run_dir")?;
        let inner = ExpertCollection::load(&dir)?;
        let seq_len = RunManifest::load(&dir)?.config.seq_len;
        write_out(out, Box::into_raw(Box::new(CbtmCollection { inner, seq_len })), "out")
    })
}

/// # Safety
/// `collection` must come from [`cbtm_collection_open`] or be null.
#[no_mangle]
pub unsafe extern "C" fn cbtm_collection_k(collection: *const CbtmCollection) -> usize {
    collection.as_ref().map_or(0, |c| c.inner.k())
}

/// Ensemble perplexity on a JSONL corpus.
///
/// # Safety
/// Pointers must be valid; `corpus_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cbtm_collection_eval_ppl(
    collection: *const CbtmCollection,
    corpus_path: *const c_char,
    temperature: f64,
    k_active: usize,
    policy: CbtmPolicy,
    out: *mut f64,
) -> CbtmStatus {
    guard(|| {
        let c = handle(collection, "collection")?;
        let corpus = load_corpus(&path_arg(corpus_path, "corpus_path")?)?;
        let batch = pack_documents(corpus.documents(), &c.inner.vocab, c.seq_len)?;
        let ens = c.inner.ensemble()?;
        let ppl = eval_ensemble_ppl(&ens, &batch, temperature, k_active, policy.into())?;
        write_out(out, ppl, "out")
    })
}

/// Expert weights for a context; `out` must hold exactly K values.
///
/// # Safety
/// Pointers must be valid; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cbtm_collection_route(
    collection: *const CbtmCollection,
    context: *const c_char,
    temperature: f64,
    k_active: usize,
    out: *mut f64,
    len: usize,
) -> CbtmStatus {
    guard(|| {
        let c = handle(collection, "collection")?;
        let text = str_arg(context, "context")?;
        let dst = out_slice(out, len, c.inner.k(), "out")?;
        let emb = c.inner.pipeline.embed_document(text);
        let w = ensemble_weights(&emb, &c.inner.clusters.centers, temperature, k_active)?;
        dst.copy_from_slice(&w.probs);
        Ok(())
    })
}

/// # Safety
/// `collection` must come from [`cbtm_collection_open`] or be null, and
/// must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cbtm_collection_free(collection: *mut CbtmCollection) {
    if !collection.is_null() {
        drop(Box::from_raw(collection));
    }
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Training FLOPs of one of `k` experts sharing `tokens`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cbtm_elm_flops(
    layers: u64,
    hidden: u64,
    seq_len: u64,
    vocab: u64,
    tokens: u64,
    k: u64,
    out: *mut f64,
) -> CbtmStatus {
    guard(|| {
        let spec = FlopSpec {
            layers,
            hidden,
            seq_len,
            vocab,
            tokens,
            k,
        };
        write_out(out, budget::elm_flops(&spec)?, "out")
    })
}

/// Log-linear cost interpolation over `n` observations.
///
/// # Safety
/// `ts` and `costs` must each hold `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cbtm_interpolate_cost(
    ts: *const f64,
    costs: *const f64,
    n: usize,
    target: f64,
    out: *mut f64,
) -> CbtmStatus {
    guard(|| {
        if ts.is_null() || costs.is_null() {
            return Err(invalid("observation arrays must not be null"));
        }
        let ts = std::slice::from_raw_parts(ts, n);
        let costs = std::slice::from_raw_parts(costs, n);
        let obs: Vec<CostPoint> = ts.iter().zip(costs).map(|(&t, &cost)| CostPoint { t, cost }).collect();
        write_out(out, budget::interpolate_cost(&obs, target)?, "out")
    })
}
