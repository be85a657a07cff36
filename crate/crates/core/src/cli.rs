//! Command-line interface.
//!
//! Every command writes a `provenance.json` (or `<file>.provenance.json` for
//! single-file outputs) holding the resolved arguments and the SHA-256 of
//! each input file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::btm::{self, Executor, ExpertCollection, Prefit, RunConfig, RunManifest};
use crate::budget::{self, CostPoint, FlopSpec, UpdateTiming};
use crate::cluster::{
    self, cluster_size_stats, overlap_matrix, write_assignment_csv, ClusterMode, ClusterModel,
};
use crate::corpus::{generate_synthetic, load_corpus, pack_documents, save_corpus, SyntheticSpec, Vocab};
use crate::embed::EmbedPipeline;
use crate::error::{Error, ErrorCategory, Result};
use crate::lm::{ModelSpec, DEFAULT_ALPHA};
use crate::route::{self, CachePolicy};
use crate::store;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_INTEGRITY: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        ErrorCategory::Validation => EXIT_VALIDATION,
        ErrorCategory::Runtime => EXIT_RUNTIME,
        ErrorCategory::Integrity => EXIT_INTEGRITY,
    }
}

#[derive(Debug, Parser)]
#[command(name = "cbtm", version, about = "Cluster-branch-train-merge for small language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled multi-domain synthetic corpus.
    Synth(SynthArgs),
    /// Fit the embedding and cluster model; write assignments and analyses.
    Cluster(ClusterArgs),
    /// Branch, train and merge one expert per cluster.
    Train(TrainArgs),
    /// Ensemble perplexity over temperature and top-k grids.
    Eval(EvalArgs),
    /// Analysis tables for a finished run.
    Analyze(AnalyzeArgs),
    /// FLOP accounting and cost interpolation.
    Budget(BudgetArgs),
    /// Run a single expert job (used by the process executor).
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        job: PathBuf,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub domains: usize,
    #[arg(long, default_value_t = 400)]
    pub docs_per_domain: usize,
    #[arg(long, default_value_t = 40)]
    pub vocab_per_domain: usize,
    #[arg(long, default_value_t = 30)]
    pub shared_vocab: usize,
    #[arg(long, default_value_t = 40)]
    pub min_len: usize,
    #[arg(long, default_value_t = 80)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.3)]
    pub shared_weight: f64,
    /// Relative domain sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub skew: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Balanced,
    Unbalanced,
    Random,
}

impl From<ModeArg> for ClusterMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Balanced => ClusterMode::Balanced,
            ModeArg::Unbalanced => ClusterMode::Unbalanced,
            ModeArg::Random => ClusterMode::Random,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Balanced)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::embed::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub shard_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 10)]
    pub top_terms: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Ngram,
    Neural,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecArg {
    Serial,
    Threads,
    Processes,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Re-run the failed or pending experts of an existing run directory.
    #[arg(long, conflicts_with_all = ["corpus", "out"])]
    pub resume: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    pub corpus: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, required_unless_present = "resume")]
    pub seed: Option<u64>,
    /// Directory written by `cbtm cluster`; reuses its pipeline and centers.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Balanced)]
    pub mode: ModeArg,
    /// Total training tokens (default: every token of the corpus once).
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub rows_per_worker: usize,
    /// Tokens used to train the seed model (default: a tenth of the budget).
    #[arg(long)]
    pub seed_tokens: Option<u64>,
    #[arg(long, value_enum, default_value_t = ModelArg::Ngram)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 32)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 5000)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = crate::embed::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub shard_size: usize,
    #[arg(long, value_enum, default_value_t = ExecArg::Processes)]
    pub executor: ExecArg,
    /// Concurrent jobs for the threads and processes executors.
    #[arg(long, default_value_t = 4)]
    pub parallel: usize,
    /// Make the listed experts fail (failure drills).
    #[arg(long, value_delimiter = ',')]
    pub fail_expert: Vec<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Temperatures, comma separated (default: the standard sweep grid).
    #[arg(long, value_delimiter = ',')]
    pub temperature: Vec<f64>,
    /// Top-k values, comma separated (default: K).
    #[arg(long, value_delimiter = ',')]
    pub top_k: Vec<usize>,
    #[arg(long, default_value = "per_token")]
    pub policy: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Specialization,
    Terms,
    Overlap,
    Sizes,
    Flops,
    Speedup,
    Updates,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum)]
    pub which: Which,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out corpus (specialization, overlap).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub top_terms: usize,
    /// Layer count and hidden size for the FLOP report.
    #[arg(long, default_value_t = 1)]
    pub layers: u64,
    #[arg(long, default_value_t = 64)]
    pub hidden: u64,
    /// CSV files with `t,cost` rows for the speedup report.
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[arg(long)]
    pub cbtm: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<f64>,
    /// FLOPs added to every point of both curves, e.g. seed pretraining.
    #[arg(long, default_value_t = 0.0)]
    pub pretrain_flops: f64,
    /// Modeled per-update communication cost for the updates report.
    #[arg(long, default_value_t = 0.0)]
    pub penalty: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BudgetArgs {
    #[arg(long)]
    pub layers: u64,
    #[arg(long)]
    pub hidden: u64,
    #[arg(long)]
    pub seq_len: u64,
    #[arg(long)]
    pub vocab: u64,
    #[arg(long)]
    pub tokens: u64,
    #[arg(long, default_value_t = 1)]
    pub k: u64,
    /// Optional `t,cost` CSV to interpolate at `--target`.
    #[arg(long, requires = "target")]
    pub interpolate: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<f64>,
    /// FLOPs added to every point of the interpolated curve.
    #[arg(long, default_value_t = 0.0, requires = "interpolate")]
    pub pretrain_flops: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    command: &'a str,
    tool_version: &'a str,
    config: &'a T,
    inputs: BTreeMap<String, String>,
}

fn write_provenance<T: Serialize>(path: &Path, command: &str, config: &T, inputs: &[&Path]) -> Result<()> {
    let mut digests = BTreeMap::new();
    for p in inputs {
        digests.insert(p.display().to_string(), store::digest_file(p)?);
    }
    store::write_json(
        path,
        &Provenance {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: digests,
        },
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Cluster(a) => cmd_cluster(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Budget(a) => cmd_budget(&a),
        Command::Worker { job } => btm::run_job_file(&job).map(|_| ()),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_domains: a.domains,
        vocab_per_domain: a.vocab_per_domain,
        shared_vocab: a.shared_vocab,
        docs_per_domain: a.docs_per_domain,
        doc_length_range: (a.min_len, a.max_len),
        skew: a.skew.clone(),
        shared_weight: a.shared_weight,
        seed: a.seed,
    };
    let syn = generate_synthetic(&spec)?;
    save_corpus(&syn.corpus, &a.out)?;
    write_provenance(&sidecar(&a.out), "synth", a, &[])
}

fn cmd_cluster(a: &ClusterArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut config = RunConfig::new(a.k, 1, a.seed);
    config.cluster_mode = a.mode.into();
    config.embed_dim = a.dim;
    config.shard_size = a.shard_size;
    config.kmeans_max_iter = a.max_iter;
    config.validate()?;
    let (pipeline, clusters, assignment) = btm::fit_clusters(&corpus, &config)?;

    mkdir(&a.out)?;
    pipeline.save(&a.out.join("pipeline.json"))?;
    clusters.save(&a.out.join("clusters.json"))?;
    let ids: Vec<&str> = corpus.documents().iter().map(|d| d.id.as_str()).collect();
    write_assignment_csv(&a.out.join("assignments.csv"), &ids, &assignment)?;
    store::write_json(&a.out.join("sizes.json"), &cluster_size_stats(&assignment)?)?;
    write_top_terms(&a.out.join("top_terms.csv"), &pipeline, &clusters, a.top_terms)?;
    let labels = corpus.labels();
    if labels.iter().all(Option::is_some) {
        overlap_matrix(&assignment, &labels)?.write_csv(&a.out.join("overlap.csv"))?;
    }
    write_provenance(&a.out.join("provenance.json"), "cluster", a, &[&a.corpus])
}

fn write_top_terms(path: &Path, pipeline: &EmbedPipeline, clusters: &ClusterModel, m: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["cluster", "rank", "term", "weight"])?;
    for (c, center) in clusters.centers.iter().enumerate() {
        for (rank, (term, weight)) in pipeline.top_terms(center, m)?.into_iter().enumerate() {
            w.write_record([c.to_string(), rank.to_string(), term, weight.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn executor(kind: ExecArg, parallel: usize, fail: &[usize]) -> Result<Executor> {
    let mut exec = match kind {
        ExecArg::Serial => Executor::serial(),
        ExecArg::Threads => Executor::threads(parallel),
        ExecArg::Processes => {
            let program = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
            Executor::processes(program, parallel)
        }
    };
    exec.inject_failure = fail.to_vec();
    Ok(exec)
}

fn report_outcome(outcome: &btm::RunOutcome) -> Result<()> {
    let failed: Vec<String> = outcome
        .manifest
        .records
        .iter()
        .filter(|r| r.status != btm::JobStatus::Done)
        .map(|r| format!("{} ({})", r.cluster, r.message.as_deref().unwrap_or("not run")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::JobFailed {
            expert: outcome.manifest.records.iter().find(|r| r.status != btm::JobStatus::Done).map_or(0, |r| r.cluster),
            message: format!("unfinished experts: {}; rerun with --resume", failed.join(", ")),
        })
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let exec = executor(a.executor, a.parallel, &a.fail_expert)?;
    if let Some(run_dir) = &a.resume {
        let outcome = btm::resume(run_dir, &exec)?;
        write_provenance(
            &run_dir.join("resume.provenance.json"),
            "train --resume",
            a,
            &[&RunManifest::path(run_dir)],
        )?;
        return report_outcome(&outcome);
    }
    let (Some(corpus_path), Some(out), Some(seed)) = (&a.corpus, &a.out, a.seed) else {
        return Err(Error::InvalidConfig("--corpus, --out and --seed are required".into()));
    };
    let corpus = load_corpus(corpus_path)?;
    let mut config = RunConfig::new(a.k, 1, seed);
    config.token_budget = match a.budget {
        Some(b) => b,
        None => corpus.documents().iter().map(|d| d.tokens().count() as u64 + 1).sum(),
    };
    config.workers = a.workers.unwrap_or(a.k);
    config.rows_per_worker = a.rows_per_worker;
    config.seed_tokens = a.seed_tokens.unwrap_or(config.token_budget / 10);
    config.model = match a.model {
        ModelArg::Ngram => ModelSpec::Ngram {
            order: a.order,
            lambdas: None,
            alpha: a.alpha,
        },
        ModelArg::Neural => ModelSpec::Neural {
            emb_dim: a.emb_dim,
            hidden: a.hidden,
            context: 3,
        },
    };
    config.peak_lr = a.lr;
    config.dropout = a.dropout;
    config.seq_len = a.seq_len;
    config.vocab_size = a.vocab_size;
    config.cluster_mode = a.mode.into();
    config.embed_dim = a.dim;
    config.shard_size = a.shard_size;

    let mut inputs: Vec<&Path> = vec![corpus_path];
    let prefit = match &a.clusters {
        Some(dir) => {
            let p = Prefit {
                pipeline: EmbedPipeline::load(&dir.join("pipeline.json"))?,
                clusters: ClusterModel::load(&dir.join("clusters.json"))?,
            };
            config.cluster_mode = p.clusters.meta.mode;
            Some(p)
        }
        None => None,
    };
    let cluster_files: Vec<PathBuf> = a
        .clusters
        .iter()
        .flat_map(|d| [d.join("pipeline.json"), d.join("clusters.json")])
        .collect();
    inputs.extend(cluster_files.iter().map(PathBuf::as_path));

    let outcome = btm::run_pipeline_with(&corpus, &config, out, &exec, prefit)?;
    write_provenance(&out.join("provenance.json"), "train", &(a, &config), &inputs)?;
    report_outcome(&outcome)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let collection = ExpertCollection::load(&a.run)?;
    let manifest = RunManifest::load(&a.run)?;
    let corpus = load_corpus(&a.corpus)?;
    let policy: CachePolicy = a.policy.parse()?;
    let temps = if a.temperature.is_empty() {
        route::DEFAULT_TEMPERATURE_GRID.to_vec()
    } else {
        a.temperature.clone()
    };
    let ks = if a.top_k.is_empty() {
        vec![collection.k()]
    } else {
        a.top_k.clone()
    };
    let batch = pack_documents(corpus.documents(), &collection.vocab, manifest.config.seq_len)?;
    let ensemble = collection.ensemble()?;
    let rows = route::temperature_sweep(&ensemble, &batch, &temps, &ks, policy)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            mkdir(parent)?;
        }
    }
    route::write_sweep_csv(&a.out, &rows)?;
    write_provenance(
        &sidecar(&a.out),
        "eval",
        a,
        &[&a.corpus, &a.run.join("collection.json"), &RunManifest::path(&a.run)],
    )
}

fn read_cost_csv(path: &Path) -> Result<Vec<CostPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    mkdir(&a.out)?;
    let manifest = RunManifest::load(&a.run)?;
    let mut inputs: Vec<PathBuf> = vec![RunManifest::path(&a.run)];
    let need_corpus = || {
        a.corpus
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("--corpus is required for {:?}", a.which)))
    };
    match a.which {
        Which::Specialization => {
            let path = need_corpus()?;
            inputs.push(path.clone());
            let collection = ExpertCollection::load(&a.run)?;
            let docs = load_corpus(path)?;
            let m = btm::specialization_matrix(&collection, docs.documents(), manifest.config.seq_len)?;
            let mut w = csv::Writer::from_path(a.out.join("specialization.csv"))
                .map_err(|e| Error::Serialization(e.to_string()))?;
            let mut header = vec!["expert".to_string()];
            header.extend((0..m.len()).map(|c| format!("cluster_{c}")));
            w.write_record(&header)?;
            for (e, row) in m.iter().enumerate() {
                let mut rec = vec![e.to_string()];
                rec.extend(row.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&a.out, e))?;
        }
        Which::Terms => {
            let collection = ExpertCollection::load(&a.run)?;
            write_top_terms(&a.out.join("top_terms.csv"), &collection.pipeline, &collection.clusters, a.top_terms)?;
        }
        Which::Overlap => {
            let path = need_corpus()?;
            inputs.push(path.clone());
            let collection = ExpertCollection::load(&a.run)?;
            let docs = load_corpus(path)?;
            let emb = collection.pipeline.embed_all(docs.documents());
            let assignment = collection.clusters.predict(&emb)?;
            overlap_matrix(&assignment, &docs.labels())?.write_csv(&a.out.join("overlap.csv"))?;
        }
        Which::Sizes => {
            let sizes: Vec<usize> = manifest.records.iter().map(|r| r.documents).collect();
            store::write_json(&a.out.join("sizes.json"), &cluster::size_stats(sizes))?;
        }
        Which::Flops => {
            let c = &manifest.config;
            let spec = FlopSpec {
                layers: a.layers,
                hidden: a.hidden,
                seq_len: c.seq_len as u64,
                vocab: Vocab::load(&a.run.join("vocab.json"))?.len() as u64,
                tokens: c.token_budget,
                k: c.k as u64,
            };
            #[derive(Serialize)]
            struct Report {
                spec: FlopSpec,
                elm_flops: f64,
                total_flops: f64,
            }
            store::write_json(
                &a.out.join("flops.json"),
                &Report {
                    spec,
                    elm_flops: budget::elm_flops(&spec)?,
                    total_flops: budget::total_flops(&spec)?,
                },
            )?;
        }
        Which::Speedup => {
            let (Some(dense), Some(cbtm), Some(t)) = (&a.dense, &a.cbtm, a.target) else {
                return Err(Error::InvalidConfig("speedup needs --dense, --cbtm and --target".into()));
            };
            inputs.push(dense.clone());
            inputs.push(cbtm.clone());
            let dense = budget::with_offset(&read_cost_csv(dense)?, a.pretrain_flops)?;
            let cbtm = budget::with_offset(&read_cost_csv(cbtm)?, a.pretrain_flops)?;
            let factor = budget::speedup(&dense, &cbtm, t)?;
            store::write_json(
                &a.out.join("speedup.json"),
                &serde_json::json!({ "target": t, "pretrain_flops": a.pretrain_flops, "speedup": factor }),
            )?;
        }
        Which::Updates => {
            let timing = UpdateTiming {
                configuration: format!("k={}", manifest.config.k),
                workers: manifest.config.workers,
                expert_max: manifest
                    .records
                    .iter()
                    .filter(|r| r.status == btm::JobStatus::Done)
                    .map(|r| r.max_seconds_per_update)
                    .collect(),
            };
            let rows = budget::update_report(&[timing], a.penalty)?;
            budget::write_update_csv(&a.out.join("updates.csv"), &rows)?;
        }
    }
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_provenance(&a.out.join("provenance.json"), "analyze", a, &refs)
}

fn cmd_budget(a: &BudgetArgs) -> Result<()> {
    let spec = FlopSpec {
        layers: a.layers,
        hidden: a.hidden,
        seq_len: a.seq_len,
        vocab: a.vocab,
        tokens: a.tokens,
        k: a.k,
    };
    let mut report = serde_json::json!({
        "spec": spec,
        "elm_flops": budget::elm_flops(&spec)?,
        "total_flops": budget::total_flops(&spec)?,
    });
    let mut inputs: Vec<&Path> = Vec::new();
    if let (Some(path), Some(t)) = (&a.interpolate, a.target) {
        report["interpolated_cost"] = serde_json::json!(budget::interpolate_cost(&budget::with_offset(&read_cost_csv(path)?, a.pretrain_flops)?, t)?);
        inputs.push(path);
    }
    match &a.out {
        Some(out) => {
            store::write_json(out, &report)?;
            write_provenance(&sidecar(out), "budget", a, &inputs)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}
