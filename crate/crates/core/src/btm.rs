//! Cluster → branch → train → merge orchestration.
//!
//! A run directory holds every artifact of one run:
//!
//! ```text
//! run_dir/
//!   vocab.json  pipeline.json  clusters.json  assignments.csv  seed.ckpt
//!   data/<j>.jsonl            documents of cluster j
//!   jobs/<j>.json             job spec read by the worker
//!   jobs/<j>.result.json      written by the worker on success
//!   experts/<j>.ckpt          trained expert
//!   manifest.json             orchestrator state
//!   collection.json           written by merge
//! ```
//!
//! A job only reads its own data file, the vocabulary and the seed
//! checkpoint, and only writes its own checkpoint and result file. Jobs run
//! in-process (serially or on threads) or as separate `cbtm worker`
//! processes; every mode produces byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::mpsc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cluster::{
    cluster_means, fit_balanced_kmeans, fit_unbalanced_kmeans, random_assign, write_assignment_csv, Assignment,
    ClusterMode, ClusterModel, FitMeta, KMeansConfig,
};
use crate::corpus::{build_vocab, load_corpus, pack_documents, save_corpus, Corpus, Document, SequenceBatch, Vocab};
use crate::embed::{EmbedConfig, EmbedPipeline, FitProvenance};
use crate::error::{Error, Result};
use crate::lm::{new_seed, ExpertCheckpoint, ModelSpec, TrainSchedule};
use crate::route::Ensemble;
use crate::store;

const MANIFEST_VERSION: &str = "cbtm-manifest/1";
const JOB_VERSION: &str = "cbtm-job/1";
const RESULT_VERSION: &str = "cbtm-job-result/1";
const COLLECTION_VERSION: &str = "cbtm-collection/1";

/// Exit status used by a worker that was told to die mid-training.
pub const INJECTED_EXIT_CODE: i32 = 137;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k: usize,
    /// Worker budget; each expert's batch is `rows_per_worker · max(1, n/K)` rows.
    pub workers: usize,
    pub rows_per_worker: usize,
    /// Total training tokens, split across experts by cluster size.
    pub token_budget: u64,
    /// Tokens used to train the seed model on the shard (0 = untrained seed).
    /// Defaults to a tenth of the budget.
    pub seed_tokens: u64,
    pub model: ModelSpec,
    pub peak_lr: f64,
    pub dropout: f64,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub cluster_mode: ClusterMode,
    pub embed_dim: usize,
    /// Documents (from the start of the corpus) used to fit the embedding,
    /// the clusters and the seed model.
    pub shard_size: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(k: usize, token_budget: u64, seed: u64) -> Self {
        RunConfig {
            k,
            workers: k,
            rows_per_worker: 4,
            token_budget,
            seed_tokens: token_budget / 10,
            model: ModelSpec::ngram(3),
            peak_lr: 0.5,
            dropout: 0.1,
            seq_len: 64,
            vocab_size: 5000,
            cluster_mode: ClusterMode::Balanced,
            embed_dim: crate::embed::DEFAULT_DIM,
            shard_size: 1000,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 {
            return bad("K must be >= 1".into());
        }
        if self.workers == 0 || self.rows_per_worker == 0 {
            return bad("workers and rows per worker must be >= 1".into());
        }
        if self.token_budget == 0 {
            return bad("token budget must be >= 1".into());
        }
        if self.shard_size < self.k {
            return bad(format!("shard of {} documents cannot fit K = {}", self.shard_size, self.k));
        }
        if self.embed_dim == 0 {
            return bad("embedding dimension must be >= 1".into());
        }
        self.schedule(0, 1, self.expert_batch()).validate()
    }

    pub fn expert_batch(&self) -> usize {
        self.rows_per_worker * (self.workers / self.k).max(1)
    }

    fn schedule(&self, seed: u64, steps: usize, batch_size: usize) -> TrainSchedule {
        TrainSchedule {
            steps,
            batch_size,
            peak_lr: self.peak_lr,
            dropout: self.dropout,
            seed,
        }
    }

    fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-job seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_STREAM: u64 = u64::MAX;

/// Splits `total` proportionally to `weights` with the largest-remainder
/// method (ties to the lower index). The parts sum to `total` exactly.
pub fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|&w| w as u128).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut parts: Vec<u64> = Vec::with_capacity(weights.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let num = total as u128 * w as u128;
        parts.push((num / sum) as u64);
        rems.push((num % sum, i));
    }
    let mut left = total - parts.iter().sum::<u64>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in rems {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Number of steps needed to draw at least `budget` tokens when cycling
/// through the rows of `batch`, `batch_size` rows at a time.
pub fn steps_for_budget(batch: &SequenceBatch, budget: u64, batch_size: usize) -> usize {
    let lens: Vec<u64> = batch.mask.iter().map(|m| m.iter().filter(|&&x| x).count() as u64).collect();
    let n = lens.len();
    let mut tokens = 0u64;
    let mut steps = 0usize;
    while tokens < budget || steps == 0 {
        for i in 0..batch_size {
            tokens += lens[(steps * batch_size + i) % n];
        }
        steps += 1;
    }
    steps
}

// ---------------------------------------------------------------------------
// Jobs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    version: String,
    pub expert: usize,
    /// Paths relative to the run directory.
    pub data: String,
    pub vocab: String,
    pub seed_checkpoint: String,
    pub output: String,
    pub result: String,
    pub seq_len: usize,
    pub token_budget: u64,
    pub schedule: TrainSchedule,
    /// Debug knob: stop halfway through training without a checkpoint.
    #[serde(default)]
    pub inject_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    version: String,
    pub expert: usize,
    pub checkpoint_digest: String,
    pub trained_tokens: u64,
    pub steps: usize,
    pub step_seconds: Vec<f64>,
    pub wall_seconds: f64,
    pub final_loss: f64,
}

fn job_path(run_dir: &Path, expert: usize) -> PathBuf {
    run_dir.join("jobs").join(format!("{expert}.json"))
}

/// Trains one expert from its job spec. Reads only the job's data file, the
/// vocabulary and the seed checkpoint; writes only the job's checkpoint and
/// result file.
pub fn train_expert_job(run_dir: &Path, spec: &JobSpec, in_worker_process: bool) -> Result<JobResult> {
    let started = Instant::now();
    let fail = |message: String| Error::JobFailed {
        expert: spec.expert,
        message,
    };
    let corpus = match load_corpus(&run_dir.join(&spec.data)) {
        Ok(c) => c,
        Err(Error::EmptyInput(_)) => return Err(Error::EmptyCluster(spec.expert)),
        Err(e) => return Err(e),
    };
    let vocab = Vocab::load(&run_dir.join(&spec.vocab))?;
    let seed = ExpertCheckpoint::load(&run_dir.join(&spec.seed_checkpoint))?;
    if seed.vocab_digest != vocab.digest() {
        return Err(fail("seed checkpoint was built for another vocabulary".into()));
    }
    let batch = pack_documents(corpus.documents(), &vocab, spec.seq_len)?;

    let mut model = crate::lm::branch(&seed.model);
    if spec.inject_failure {
        let half = TrainSchedule {
            steps: (spec.schedule.steps / 2).max(1),
            ..spec.schedule.clone()
        };
        model.train(&batch, &half)?;
        if in_worker_process {
            std::process::exit(INJECTED_EXIT_CODE);
        }
        return Err(fail("injected failure".into()));
    }
    let report = model.train(&batch, &spec.schedule)?;
    let ck = ExpertCheckpoint::new(
        model,
        Some(spec.expert),
        vocab.digest(),
        Some(spec.schedule.clone()),
        seed.trained_tokens + report.tokens,
    )?;
    let out = run_dir.join(&spec.output);
    ck.save(&out)?;
    let result = JobResult {
        version: RESULT_VERSION.into(),
        expert: spec.expert,
        checkpoint_digest: store::digest_file(&out)?,
        trained_tokens: report.tokens,
        steps: spec.schedule.steps,
        step_seconds: report.step_seconds,
        wall_seconds: started.elapsed().as_secs_f64(),
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
    };
    store::write_json(&run_dir.join(&spec.result), &result)?;
    Ok(result)
}

/// Entry point of a worker process: `cbtm worker --job <run_dir>/jobs/<j>.json`.
pub fn run_job_file(path: &Path) -> Result<JobResult> {
    let spec: JobSpec = store::read_versioned(path, JOB_VERSION)?;
    let run_dir = path
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not inside a run directory", path.display())))?;
    train_expert_job(run_dir, &spec, true)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub cluster: usize,
    pub documents: usize,
    pub data: String,
    pub data_digest: Option<String>,
    pub token_budget: u64,
    pub steps: usize,
    pub status: JobStatus,
    pub checkpoint: String,
    pub checkpoint_digest: Option<String>,
    pub trained_tokens: u64,
    pub wall_seconds: f64,
    pub max_seconds_per_update: f64,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    version: String,
    pub config: RunConfig,
    pub vocab_digest: String,
    pub pipeline_digest: String,
    pub clusters_digest: String,
    pub seed_digest: String,
    pub records: Vec<ExpertRecord>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let m: RunManifest = store::read_versioned(&Self::path(run_dir), MANIFEST_VERSION)?;
        if m.records.len() != m.config.k {
            return Err(Error::CorruptFile {
                path: Self::path(run_dir),
                message: format!("{} records for K = {}", m.records.len(), m.config.k),
            });
        }
        Ok(m)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        store::write_json(&Self::path(run_dir), self)
    }

    pub fn all_done(&self) -> bool {
        self.records.iter().all(|r| r.status == JobStatus::Done)
    }

    /// Digest of everything except wall-clock measurements.
    pub fn run_digest(&self) -> Result<String> {
        let mut m = self.clone();
        for r in &mut m.records {
            r.wall_seconds = 0.0;
            r.max_seconds_per_update = 0.0;
        }
        Ok(store::digest_bytes(&store::to_json_bytes(&m)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateSummary {
    pub per_expert: Vec<f64>,
    pub overall: f64,
}

/// Max seconds-per-update of each expert and over all experts.
pub fn measure_updates(step_seconds: &[Vec<f64>]) -> Result<UpdateSummary> {
    let mut per_expert = Vec::with_capacity(step_seconds.len());
    for (j, s) in step_seconds.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::EmptyInput(format!("expert {j} has no recorded updates")));
        }
        per_expert.push(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    if per_expert.is_empty() {
        return Err(Error::EmptyInput("no timing records".into()));
    }
    let overall = per_expert.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(UpdateSummary { per_expert, overall })
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ExecMode {
    Serial,
    Threads(usize),
    /// Separate `program worker --job …` processes.
    Processes { program: PathBuf, max_parallel: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Executor {
    pub mode: ExecMode,
    /// Launch order of the experts; cluster order when absent.
    pub order: Option<Vec<usize>>,
    /// Experts whose jobs are made to fail (testing and drills).
    pub inject_failure: Vec<usize>,
}

impl Executor {
    pub fn serial() -> Self {
        Executor {
            mode: ExecMode::Serial,
            order: None,
            inject_failure: Vec::new(),
        }
    }

    pub fn threads(n: usize) -> Self {
        Executor {
            mode: ExecMode::Threads(n.max(1)),
            ..Self::serial()
        }
    }

    pub fn processes(program: impl Into<PathBuf>, max_parallel: usize) -> Self {
        Executor {
            mode: ExecMode::Processes {
                program: program.into(),
                max_parallel: max_parallel.max(1),
            },
            ..Self::serial()
        }
    }
}

type Outcome = (usize, std::result::Result<JobResult, String>);

fn execute(run_dir: &Path, jobs: &[usize], exec: &Executor, mut on_done: impl FnMut(Outcome) -> Result<()>) -> Result<()> {
    let mut order: Vec<usize> = match &exec.order {
        Some(o) => o.iter().copied().filter(|j| jobs.contains(j)).collect(),
        None => jobs.to_vec(),
    };
    for j in jobs {
        if !order.contains(j) {
            order.push(*j);
        }
    }
    let run_one = |j: usize| -> Outcome {
        let res = store::read_versioned::<JobSpec>(&job_path(run_dir, j), JOB_VERSION)
            .and_then(|spec| train_expert_job(run_dir, &spec, false));
        (j, res.map_err(|e| e.to_string()))
    };
    match &exec.mode {
        ExecMode::Serial => {
            for j in order {
                on_done(run_one(j))?;
            }
        }
        ExecMode::Threads(n) => {
            let next = AtomicUsize::new(0);
            let (tx, rx) = mpsc::channel::<Outcome>();
            std::thread::scope(|s| -> Result<()> {
                for _ in 0..(*n).min(order.len()) {
                    let tx = tx.clone();
                    let (next, order, run_one) = (&next, &order, &run_one);
                    s.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(&j) = order.get(i) else { break };
                        if tx.send(run_one(j)).is_err() {
                            break;
                        }
                    });
                }
                drop(tx);
                for outcome in rx {
                    on_done(outcome)?;
                }
                Ok(())
            })?;
        }
        ExecMode::Processes { program, max_parallel } => {
            let mut queue = order.into_iter();
            let mut running: Vec<(usize, Child)> = Vec::new();
            loop {
                while running.len() < *max_parallel {
                    let Some(j) = queue.next() else { break };
                    let child = Command::new(program)
                        .arg("worker")
                        .arg("--job")
                        .arg(job_path(run_dir, j))
                        .stdout(std::process::Stdio::null())
                        .spawn()
                        .map_err(|e| Error::io(program, e))?;
                    running.push((j, child));
                }
                if running.is_empty() {
                    break;
                }
                let mut finished = None;
                for (i, (_, child)) in running.iter_mut().enumerate() {
                    if let Some(status) = child.try_wait().map_err(|e| Error::io(program, e))? {
                        finished = Some((i, status));
                        break;
                    }
                }
                let Some((i, status)) = finished else {
                    std::thread::sleep(Duration::from_millis(5));
                    continue;
                };
                let (j, _) = running.remove(i);
                let outcome = if status.success() {
                    let spec: JobSpec = store::read_versioned(&job_path(run_dir, j), JOB_VERSION)?;
                    store::read_versioned::<JobResult>(&run_dir.join(&spec.result), RESULT_VERSION)
                        .map_err(|e| e.to_string())
                } else {
                    Err(format!("worker exited with {status}"))
                };
                on_done((j, outcome))?;
            }
        }
    }
    Ok(())
}

fn run_jobs(run_dir: &Path, manifest: &mut RunManifest, jobs: &[usize], exec: &Executor) -> Result<()> {
    for &j in jobs {
        let path = job_path(run_dir, j);
        let mut spec: JobSpec = store::read_versioned(&path, JOB_VERSION)?;
        spec.inject_failure = exec.inject_failure.contains(&j);
        store::write_json(&path, &spec)?;
        let _ = std::fs::remove_file(run_dir.join(&spec.output));
        let _ = std::fs::remove_file(run_dir.join(&spec.result));
        let r = &mut manifest.records[j];
        r.status = JobStatus::Running;
        r.checkpoint_digest = None;
        r.message = None;
    }
    manifest.save(run_dir)?;
    execute(run_dir, jobs, exec, |(j, outcome)| {
        let r = &mut manifest.records[j];
        match outcome {
            Ok(res) => {
                r.status = JobStatus::Done;
                r.checkpoint_digest = Some(res.checkpoint_digest);
                r.trained_tokens = res.trained_tokens;
                r.wall_seconds = res.wall_seconds;
                r.max_seconds_per_update = res.step_seconds.iter().cloned().fold(0.0, f64::max);
                r.message = None;
            }
            Err(message) => {
                log::warn!("expert {j} failed: {message}");
                r.status = JobStatus::Failed;
                r.checkpoint_digest = None;
                r.message = Some(message);
            }
        }
        manifest.save(run_dir)
    })
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Embedding pipeline and cluster model fitted ahead of time.
pub struct Prefit {
    pub pipeline: EmbedPipeline,
    pub clusters: ClusterModel,
}

/// Fits the embedding and clusters on the shard and assigns every document.
pub fn fit_clusters(corpus: &Corpus, config: &RunConfig) -> Result<(EmbedPipeline, ClusterModel, Assignment)> {
    let shard_n = config.shard_size.min(corpus.len());
    if shard_n < config.k {
        return Err(Error::InvalidConfig(format!(
            "{} shard documents cannot form K = {} clusters",
            shard_n, config.k
        )));
    }
    let shard = &corpus.documents()[..shard_n];
    let pipeline = EmbedPipeline::fit(
        shard,
        &EmbedConfig {
            dim: config.embed_dim,
            ..Default::default()
        },
        FitProvenance {
            shard: format!("first {shard_n} documents"),
            seed: config.seed,
            documents: shard_n,
        },
    )?;
    let all = pipeline.embed_all(corpus.documents());
    let (clusters, assignment) = match config.cluster_mode {
        ClusterMode::Random => {
            let assignment = random_assign(corpus.len(), config.k, config.seed)?;
            let model = ClusterModel::from_centers(
                cluster_means(&all, &assignment),
                FitMeta {
                    mode: ClusterMode::Random,
                    iterations: 0,
                    final_shift: 0.0,
                    seed: config.seed,
                    distance: Default::default(),
                    objective_history: Vec::new(),
                },
            )?;
            (model, assignment)
        }
        mode => {
            let fit = if mode == ClusterMode::Balanced {
                fit_balanced_kmeans
            } else {
                fit_unbalanced_kmeans
            };
            let (model, _) = fit(&all[..shard_n], config.k, &config.kmeans())?;
            let assignment = model.predict(&all)?;
            (model, assignment)
        }
    };
    Ok((pipeline, clusters, assignment))
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Present when every expert finished.
    pub collection: Option<ExpertCollection>,
    /// Experts (re)trained by this call.
    pub trained: Vec<usize>,
}

pub fn run_pipeline(corpus: &Corpus, config: &RunConfig, run_dir: &Path, exec: &Executor) -> Result<RunOutcome> {
    run_pipeline_with(corpus, config, run_dir, exec, None)
}

pub fn run_pipeline_with(
    corpus: &Corpus,
    config: &RunConfig,
    run_dir: &Path,
    exec: &Executor,
    prefit: Option<Prefit>,
) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let vocab = build_vocab(corpus, config.vocab_size)?;
    vocab.save(&run_dir.join("vocab.json"))?;

    let (pipeline, clusters, assignment) = match prefit {
        Some(p) => {
            if p.clusters.k != config.k {
                return Err(Error::InvalidConfig(format!(
                    "cluster model has K = {}, run asks for {}",
                    p.clusters.k, config.k
                )));
            }
            let assignment = if p.clusters.meta.mode == ClusterMode::Random {
                random_assign(corpus.len(), config.k, p.clusters.meta.seed)?
            } else {
                p.clusters.predict(&p.pipeline.embed_all(corpus.documents()))?
            };
            (p.pipeline, p.clusters, assignment)
        }
        None => fit_clusters(corpus, config)?,
    };
    pipeline.save(&run_dir.join("pipeline.json"))?;
    clusters.save(&run_dir.join("clusters.json"))?;
    let ids: Vec<&str> = corpus.documents().iter().map(|d| d.id.as_str()).collect();
    write_assignment_csv(&run_dir.join("assignments.csv"), &ids, &assignment)?;

    // Seed model, optionally trained on the shard.
    let mut seed_model = new_seed(&config.model, vocab.len(), derive_seed(config.seed, SEED_STREAM))?;
    let mut seed_schedule = None;
    let mut seed_tokens = 0;
    if config.seed_tokens > 0 {
        let shard_n = config.shard_size.min(corpus.len());
        let batch = pack_documents(&corpus.documents()[..shard_n], &vocab, config.seq_len)?;
        let bs = config.rows_per_worker * config.workers;
        let schedule = config.schedule(
            derive_seed(config.seed, SEED_STREAM),
            steps_for_budget(&batch, config.seed_tokens, bs),
            bs,
        );
        seed_tokens = seed_model.train(&batch, &schedule)?.tokens;
        seed_schedule = Some(schedule);
    }
    let seed_ck = ExpertCheckpoint::new(seed_model, None, vocab.digest(), seed_schedule, seed_tokens)?;
    seed_ck.save(&run_dir.join("seed.ckpt"))?;

    // Per-cluster data and token budgets.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); config.k];
    for (i, &c) in assignment.clusters.iter().enumerate() {
        members[c].push(i);
    }
    let mut batches: Vec<Option<SequenceBatch>> = Vec::with_capacity(config.k);
    for m in &members {
        let docs: Vec<Document> = m.iter().map(|&i| corpus.documents()[i].clone()).collect();
        batches.push(if docs.is_empty() {
            None
        } else {
            Some(pack_documents(&docs, &vocab, config.seq_len)?)
        });
    }
    let sizes: Vec<u64> = batches.iter().map(|b| b.as_ref().map_or(0, |b| b.unmasked() as u64)).collect();
    let budgets = apportion(config.token_budget, &sizes);
    let bs = config.expert_batch();

    let mut records = Vec::with_capacity(config.k);
    for j in 0..config.k {
        let data = format!("data/{j}.jsonl");
        let checkpoint = format!("experts/{j}.ckpt");
        let mut record = ExpertRecord {
            cluster: j,
            documents: members[j].len(),
            data: data.clone(),
            data_digest: None,
            token_budget: budgets[j],
            steps: 0,
            status: JobStatus::Pending,
            checkpoint: checkpoint.clone(),
            checkpoint_digest: None,
            trained_tokens: 0,
            wall_seconds: 0.0,
            max_seconds_per_update: 0.0,
            message: None,
        };
        let _ = std::fs::remove_file(run_dir.join(&checkpoint));
        match &batches[j] {
            None => {
                record.status = JobStatus::Failed;
                record.message = Some(Error::EmptyCluster(j).to_string());
            }
            Some(batch) => {
                let subset = corpus.subset(&members[j], &format!("cluster {j}"))?;
                let data_path = run_dir.join(&data);
                save_corpus(&subset, &data_path)?;
                record.data_digest = Some(store::digest_file(&data_path)?);
                record.steps = steps_for_budget(batch, budgets[j].max(1), bs);
                let spec = JobSpec {
                    version: JOB_VERSION.into(),
                    expert: j,
                    data,
                    vocab: "vocab.json".into(),
                    seed_checkpoint: "seed.ckpt".into(),
                    output: checkpoint,
                    result: format!("jobs/{j}.result.json"),
                    seq_len: config.seq_len,
                    token_budget: budgets[j],
                    schedule: config.schedule(derive_seed(config.seed, j as u64), record.steps, bs),
                    inject_failure: false,
                };
                store::write_json(&job_path(run_dir, j), &spec)?;
            }
        }
        records.push(record);
    }
    let _ = std::fs::remove_file(run_dir.join("collection.json"));

    let mut manifest = RunManifest {
        version: MANIFEST_VERSION.into(),
        config: config.clone(),
        vocab_digest: store::digest_file(&run_dir.join("vocab.json"))?,
        pipeline_digest: store::digest_file(&run_dir.join("pipeline.json"))?,
        clusters_digest: store::digest_file(&run_dir.join("clusters.json"))?,
        seed_digest: store::digest_file(&run_dir.join("seed.ckpt"))?,
        records,
    };
    let jobs: Vec<usize> = (0..config.k).filter(|&j| batches[j].is_some()).collect();
    run_jobs(run_dir, &mut manifest, &jobs, exec)?;
    finish(run_dir, manifest, jobs)
}

fn finish(run_dir: &Path, manifest: RunManifest, trained: Vec<usize>) -> Result<RunOutcome> {
    let collection = if manifest.all_done() {
        Some(merge_run(run_dir, &manifest)?)
    } else {
        None
    };
    Ok(RunOutcome {
        manifest,
        collection,
        trained,
    })
}

/// Re-runs every expert that is not done. Done checkpoints are verified and
/// left untouched.
pub fn resume(run_dir: &Path, exec: &Executor) -> Result<RunOutcome> {
    let mut manifest = RunManifest::load(run_dir)?;
    for r in &manifest.records {
        if r.status == JobStatus::Done {
            verify_checkpoint(run_dir, r)?;
        }
    }
    let jobs: Vec<usize> = manifest
        .records
        .iter()
        .filter(|r| r.status != JobStatus::Done && job_path(run_dir, r.cluster).exists())
        .map(|r| r.cluster)
        .collect();
    if !jobs.is_empty() {
        run_jobs(run_dir, &mut manifest, &jobs, exec)?;
    }
    finish(run_dir, manifest, jobs)
}

fn verify_checkpoint(run_dir: &Path, r: &ExpertRecord) -> Result<()> {
    let path = run_dir.join(&r.checkpoint);
    let expected = r
        .checkpoint_digest
        .as_deref()
        .ok_or_else(|| Error::Integrity(format!("expert {}: done without a checkpoint digest", r.cluster)))?;
    let actual = store::digest_file(&path)
        .map_err(|_| Error::Integrity(format!("expert {}: checkpoint {} is missing", r.cluster, path.display())))?;
    if actual != expected {
        return Err(Error::Integrity(format!(
            "expert {}: checkpoint digest {actual} does not match manifest {expected}",
            r.cluster
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Merge
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileRef {
    path: String,
    digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CollectionFile {
    version: String,
    k: usize,
    vocab: FileRef,
    pipeline: FileRef,
    clusters: FileRef,
    experts: Vec<FileRef>,
}

/// K experts with the routing state needed at inference.
#[derive(Debug, Clone)]
pub struct ExpertCollection {
    pub vocab: Vocab,
    pub pipeline: EmbedPipeline,
    pub clusters: ClusterModel,
    /// Indexed by cluster id.
    pub experts: Vec<ExpertCheckpoint>,
}

impl ExpertCollection {
    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn ensemble(&self) -> Result<Ensemble<'_>> {
        Ensemble::new(
            self.experts.iter().map(|e| &e.model as &dyn crate::lm::LanguageModel).collect(),
            &self.clusters.centers,
            &self.pipeline,
            &self.vocab,
        )
    }

    /// Loads `collection.json` from a run directory and verifies every digest.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("collection.json");
        let file: CollectionFile = store::read_versioned(&path, COLLECTION_VERSION)?;
        let check = |r: &FileRef| -> Result<PathBuf> {
            let p = run_dir.join(&r.path);
            let d = store::digest_file(&p)?;
            if d != r.digest {
                return Err(Error::Integrity(format!("{} digest {d} does not match {}", r.path, r.digest)));
            }
            Ok(p)
        };
        let vocab = Vocab::load(&check(&file.vocab)?)?;
        let pipeline = EmbedPipeline::load(&check(&file.pipeline)?)?;
        let clusters = ClusterModel::load(&check(&file.clusters)?)?;
        let experts = file
            .experts
            .iter()
            .map(|r| ExpertCheckpoint::load(&check(r)?))
            .collect::<Result<Vec<_>>>()?;
        merge(experts, clusters, pipeline, vocab)
    }
}

/// Orders the checkpoints by cluster id and checks that they cover 0..K
/// exactly once and match the vocabulary.
pub fn merge(
    checkpoints: Vec<ExpertCheckpoint>,
    clusters: ClusterModel,
    pipeline: EmbedPipeline,
    vocab: Vocab,
) -> Result<ExpertCollection> {
    let k = clusters.k;
    let mut slots: Vec<Option<ExpertCheckpoint>> = vec![None; k];
    for ck in checkpoints {
        let c = ck
            .cluster
            .ok_or_else(|| Error::Integrity("checkpoint has no cluster id".into()))?;
        if c >= k {
            return Err(Error::Integrity(format!("expert for cluster {c} but K = {k}")));
        }
        if slots[c].is_some() {
            return Err(Error::Integrity(format!("two experts for cluster {c}")));
        }
        if ck.vocab_digest != vocab.digest() {
            return Err(Error::Integrity(format!("expert {c} was trained with another vocabulary")));
        }
        slots[c] = Some(ck);
    }
    let experts = slots
        .into_iter()
        .enumerate()
        .map(|(c, s)| s.ok_or_else(|| Error::Integrity(format!("no expert for cluster {c}"))))
        .collect::<Result<Vec<_>>>()?;
    if clusters.dim != pipeline.dim() {
        return Err(Error::Integrity("cluster centers do not match the embedding dimension".into()));
    }
    Ok(ExpertCollection {
        vocab,
        pipeline,
        clusters,
        experts,
    })
}

/// Verifies a finished run and writes its `collection.json`.
pub fn merge_run(run_dir: &Path, manifest: &RunManifest) -> Result<ExpertCollection> {
    let mut experts = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        if r.status != JobStatus::Done {
            return Err(Error::Integrity(format!("expert {} is {:?}", r.cluster, r.status)));
        }
        verify_checkpoint(run_dir, r)?;
        experts.push(FileRef {
            path: r.checkpoint.clone(),
            digest: r.checkpoint_digest.clone().unwrap_or_default(),
        });
    }
    let file_ref = |p: &str| -> Result<FileRef> {
        Ok(FileRef {
            path: p.into(),
            digest: store::digest_file(&run_dir.join(p))?,
        })
    };
    let file = CollectionFile {
        version: COLLECTION_VERSION.into(),
        k: manifest.records.len(),
        vocab: file_ref("vocab.json")?,
        pipeline: file_ref("pipeline.json")?,
        clusters: file_ref("clusters.json")?,
        experts,
    };
    for (got, want) in [
        (&file.vocab.digest, &manifest.vocab_digest),
        (&file.pipeline.digest, &manifest.pipeline_digest),
        (&file.clusters.digest, &manifest.clusters_digest),
    ] {
        if got != want {
            return Err(Error::Integrity("run files changed since the manifest was written".into()));
        }
    }
    store::write_json(&run_dir.join("collection.json"), &file)?;
    ExpertCollection::load(run_dir)
}

/// Held-out documents grouped by the cluster they are assigned to.
pub fn group_by_cluster(collection: &ExpertCollection, docs: &[Document]) -> Result<BTreeMap<usize, Vec<Document>>> {
    let emb = collection.pipeline.embed_all(docs);
    let a = collection.clusters.predict(&emb)?;
    let mut groups: BTreeMap<usize, Vec<Document>> = BTreeMap::new();
    for (d, &c) in docs.iter().zip(&a.clusters) {
        groups.entry(c).or_default().push(d.clone());
    }
    Ok(groups)
}

/// Entry `(e, c)` is the perplexity of expert `e` on the held-out documents
/// of cluster `c` divided by that of expert `c`. Clusters without held-out
/// documents give a column of NaN.
pub fn specialization_matrix(collection: &ExpertCollection, docs: &[Document], seq_len: usize) -> Result<Vec<Vec<f64>>> {
    let k = collection.k();
    let mut m = vec![vec![f64::NAN; k]; k];
    for (c, group) in group_by_cluster(collection, docs)? {
        let batch = pack_documents(&group, &collection.vocab, seq_len)?;
        let ppl: Vec<f64> = collection
            .experts
            .iter()
            .map(|e| crate::lm::perplexity(&e.model, &batch))
            .collect::<Result<_>>()?;
        for e in 0..k {
            m[e][c] = ppl[e] / ppl[c];
        }
    }
    Ok(m)
}
