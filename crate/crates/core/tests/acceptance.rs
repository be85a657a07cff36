//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbtm::btm::{
    resume, run_pipeline, specialization_matrix, ExpertCollection, Executor, JobStatus, RunConfig,
};
use cbtm::budget::{elm_flops, elm_flops_ratio, interpolate_cost, speedup, total_flops, CostPoint, FlopSpec};
use cbtm::cluster::{
    balanced_assign, cluster_size_stats, fit_balanced_kmeans, fit_unbalanced_kmeans, AuctionConfig, ClusterMode,
    DistanceMode, KMeansConfig,
};
use cbtm::embed::{EmbedConfig, EmbedPipeline, FitProvenance};
use cbtm::corpus::{build_vocab, pack_documents, Corpus, Document, Provenance, SequenceBatch, SyntheticSpec, Vocab};
use cbtm::lm::{grad_check, perplexity, ExpertModel, NGramModel, NeuralModel, TrainSchedule, DEFAULT_ALPHA};
use cbtm::lm::{recount_oracle, LanguageModel};
use cbtm::route::{
    ema_step, ensemble_weights, eval_ensemble_ppl, perf_route_updating, softmax_accuracies, CachePolicy,
    FewShotExample, FewShotTask,
};

use common::{brute_force_balanced, hungarian_balanced, sq_dist, synthetic_split, Split};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Suite {
    failed: Vec<usize>,
}

impl Suite {
    /// `extra` is time spent in shared setup that the criterion depends on.
    fn run(&mut self, n: usize, name: &str, limit: Duration, extra: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed() + extra;
        let (ok, detail) = match result {
            Ok(d) if elapsed < limit => (true, d),
            Ok(d) => (false, format!("{d}; over the time limit")),
            Err(e) => (false, e),
        };
        println!(
            "criterion {n:>2} {name}: {} ({detail}; {:.2}s of {}s)",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if !ok {
            self.failed.push(n);
        }
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------------------
// 1. Balanced assignment
// ---------------------------------------------------------------------------

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
}

fn balanced_assignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let k = rng.gen_range(1..=3);
        let d = rng.gen_range(k..=12);
        let emb = random_points(&mut rng, d, 2);
        let centers = random_points(&mut rng, k, 2);
        let mode = if i % 2 == 0 { DistanceMode::Euclidean } else { DistanceMode::Squared };
        let a = balanced_assign(&emb, &centers, mode, &AuctionConfig::default()).map_err(|e| e.to_string())?;
        let cost: Vec<Vec<f64>> = emb
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| match mode {
                        DistanceMode::Euclidean => sq_dist(p, c).sqrt(),
                        DistanceMode::Squared => sq_dist(p, c),
                    })
                    .collect()
            })
            .collect();
        let got: f64 = a.clusters.iter().enumerate().map(|(p, &c)| cost[p][c]).sum();
        let best = brute_force_balanced(&cost, k);
        worst = worst.max((got - best).abs());
        ensure((got - best).abs() <= 1e-6, || format!("instance {i} (D={d}, K={k}): {got} vs optimum {best}"))?;
        let sizes = a.sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        ensure(hi - lo <= 1, || format!("instance {i}: sizes {sizes:?}"))?;
    }
    let mut worst64: f64 = 0.0;
    for i in 0..10 {
        let emb = random_points(&mut rng, 64, 4);
        let centers = random_points(&mut rng, 8, 4);
        let a = balanced_assign(&emb, &centers, DistanceMode::Euclidean, &AuctionConfig::default())
            .map_err(|e| e.to_string())?;
        ensure(a.sizes().iter().all(|&s| s == 8), || format!("D=64 instance {i}: sizes {:?}", a.sizes()))?;
        let cost: Vec<Vec<f64>> = emb.iter().map(|p| centers.iter().map(|c| sq_dist(p, c).sqrt()).collect()).collect();
        let got: f64 = a.clusters.iter().enumerate().map(|(p, &c)| cost[p][c]).sum();
        let best = hungarian_balanced(&cost, 8);
        worst64 = worst64.max((got - best).abs());
        ensure((got - best).abs() <= 1e-6, || format!("D=64 instance {i}: {got} vs optimum {best}"))?;
    }
    Ok(format!(
        "200 small instances, max gap to brute force {worst:.1e}; D=64 sizes all 8, max gap to Hungarian {worst64:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 2-4. Closed forms
// ---------------------------------------------------------------------------

fn flop_formula() -> Outcome {
    let spec = FlopSpec {
        layers: 2,
        hidden: 4,
        seq_len: 8,
        vocab: 16,
        tokens: 100,
        k: 1,
    };
    let f = elm_flops(&spec).map_err(|e| e.to_string())?;
    // 96·2·16·100 · (1 + 8/24 + 16/128) evaluated over the common denominator 384.
    let oracle = 96.0 * 2.0 * 16.0 * 100.0 * (384.0 + 128.0 + 48.0) / 384.0;
    ensure(f == 448000.0 && oracle == 448000.0, || format!("got {f}, oracle {oracle}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..100 {
        let dense = FlopSpec {
            layers: rng.gen_range(1..64),
            hidden: rng.gen_range(1..8192),
            seq_len: rng.gen_range(1..8192),
            vocab: rng.gen_range(1..100_000),
            tokens: rng.gen_range(1..1u64 << 40),
            k: 1,
        };
        let k = rng.gen_range(1..=128);
        let split = FlopSpec { k, ..dense };
        let (num_k, den_k) = elm_flops_ratio(&split).map_err(|e| e.to_string())?;
        let (num_1, den_1) = elm_flops_ratio(&dense).map_err(|e| e.to_string())?;
        ensure(k as u128 * num_k * den_1 as u128 == num_1 * den_k as u128, || {
            format!("spec {i}: k·F(T,k) differs from F(T,1) as fractions")
        })?;
        let total = total_flops(&split).map_err(|e| e.to_string())?;
        let single = elm_flops(&dense).map_err(|e| e.to_string())?;
        ensure(total == single, || format!("spec {i}: total {total} vs dense {single}"))?;
    }
    Ok("F = 448000; k·F(T,k) = F(T,1) exactly on 100 random specs".into())
}

fn interpolation() -> Outcome {
    let obs = [CostPoint { t: 10.0, cost: 100.0 }, CostPoint { t: 20.0, cost: 1000.0 }];
    let got = interpolate_cost(&obs, 15.0).map_err(|e| e.to_string())?;
    let oracle = 10f64.powf(2.5);
    ensure((got - 316.227766).abs() <= 1e-6 && (got - oracle).abs() <= 1e-9, || {
        format!("interpolated {got}, expected 316.227766")
    })?;
    for t in [10.0, 12.5, 15.0, 19.99, 20.0] {
        let s = speedup(&obs, &obs, t).map_err(|e| e.to_string())?;
        ensure(s == 1.0, || format!("speedup(a, a, {t}) = {s}"))?;
    }
    Ok(format!("c(15) = {got:.6}; self-speedup exactly 1"))
}

fn routing_weights() -> Outcome {
    let centers = vec![vec![1.0], vec![2.0]];
    let w = ensemble_weights(&[0.0], &centers, 1.0, 2).map_err(|e| e.to_string())?;
    let z = (-1f64).exp() + (-4f64).exp();
    let oracle = [(-1f64).exp() / z, (-4f64).exp() / z];
    ensure(
        (w.probs[0] - 0.952574).abs() <= 1e-6
            && (w.probs[1] - 0.047426).abs() <= 1e-6
            && (w.probs[0] - oracle[0]).abs() <= 1e-12,
        || format!("weights {:?}", w.probs),
    )?;
    let cold = ensemble_weights(&[0.0], &centers, 1e-6, 2).map_err(|e| e.to_string())?;
    ensure(cold.probs == [1.0, 0.0], || format!("T → 0 gives {:?}", cold.probs))?;
    let hot = ensemble_weights(&[0.0], &centers, 1e6, 2).map_err(|e| e.to_string())?;
    ensure(hot.probs.iter().all(|p| (p - 0.5).abs() <= 1e-3), || format!("T = 1e6 gives {:?}", hot.probs))?;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=16);
        let dim = rng.gen_range(1..=8);
        let centers = random_points(&mut rng, k, dim);
        let point = random_points(&mut rng, 1, dim).remove(0);
        let t = 10f64.powf(rng.gen_range(-4.0..4.0));
        let k_active = rng.gen_range(1..=k);
        let w = ensemble_weights(&point, &centers, t, k_active).map_err(|e| e.to_string())?;
        let s: f64 = w.probs.iter().sum();
        worst = worst.max((s - 1.0).abs());
        ensure(w.probs.iter().all(|&p| p >= 0.0), || format!("negative weight in {:?}", w.probs))?;
    }
    ensure(worst <= 1e-9, || format!("weight sum off by {worst:e}"))?;
    Ok(format!(
        "[{:.6}, {:.6}]; one-hot as T → 0; uniform within 1e-3 at T = 1e6; max |Σw − 1| = {worst:.1e}",
        w.probs[0], w.probs[1]
    ))
}

// ---------------------------------------------------------------------------
// 5-8. Shared 8-domain runs
// ---------------------------------------------------------------------------

const TEMPERATURE: f64 = 0.1;
const EMBED_DIM: usize = 16;

struct Fixture {
    split: Split,
    seq_len: usize,
    dense: ExpertCollection,
    k4: ExpertCollection,
    k8: ExpertCollection,
    random8: ExpertCollection,
    build: Duration,
    min_domain_docs: usize,
}

fn train_collection(split: &Split, k: usize, mode: ClusterMode, dir: &Path) -> ExpertCollection {
    let mut cfg = RunConfig::new(k, split.train_tokens, 11);
    cfg.workers = 8;
    cfg.cluster_mode = mode;
    cfg.embed_dim = EMBED_DIM;
    let out = run_pipeline(&split.train, &cfg, dir, &Executor::threads(8)).expect("pipeline run");
    out.collection.expect("every expert finished")
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let start = Instant::now();
        let split = synthetic_split(&SyntheticSpec::new(8, 450, 7), 200);
        let n_train = split.train.len();
        let min_domain_docs = (0..8)
            .map(|d| split.synthetic.gold[..n_train].iter().filter(|&&g| g == d).count())
            .min()
            .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dense = train_collection(&split, 1, ClusterMode::Balanced, &tmp.path().join("k1"));
        let k4 = train_collection(&split, 4, ClusterMode::Balanced, &tmp.path().join("k4"));
        let k8 = train_collection(&split, 8, ClusterMode::Balanced, &tmp.path().join("k8"));
        let random8 = train_collection(&split, 8, ClusterMode::Random, &tmp.path().join("r8"));
        Fixture {
            seq_len: RunConfig::new(1, 1, 0).seq_len,
            split,
            dense,
            k4,
            k8,
            random8,
            build: start.elapsed(),
            min_domain_docs,
        }
    })
}

fn ensemble_ppl(col: &ExpertCollection, docs: &[Document], seq_len: usize, k_active: usize) -> Result<f64, String> {
    let ens = col.ensemble().map_err(|e| e.to_string())?;
    let batch = pack_documents(docs, &col.vocab, seq_len).map_err(|e| e.to_string())?;
    eval_ensemble_ppl(&ens, &batch, TEMPERATURE, k_active, CachePolicy::PerToken).map_err(|e| e.to_string())
}

fn scaling_direction(fx: &Fixture) -> Outcome {
    ensure(fx.min_domain_docs >= 400, || format!("only {} training docs in some domain", fx.min_domain_docs))?;
    let p1 = ensemble_ppl(&fx.dense, &fx.split.eval, fx.seq_len, 1)?;
    let p4 = ensemble_ppl(&fx.k4, &fx.split.eval, fx.seq_len, 4)?;
    let p8 = ensemble_ppl(&fx.k8, &fx.split.eval, fx.seq_len, 8)?;
    let gap = (p1 - p8) / p1;
    let detail = format!("ppl K=1 {p1:.3}, K=4 {p4:.3}, K=8 {p8:.3}, gap {:.1}%", 100.0 * gap);
    ensure(p8 < p4 && p4 < p1 && gap >= 0.05, || detail.clone())?;
    Ok(detail)
}

fn random_clusters(fx: &Fixture) -> Outcome {
    let p1 = ensemble_ppl(&fx.dense, &fx.split.eval, fx.seq_len, 1)?;
    let pr = ensemble_ppl(&fx.random8, &fx.split.eval, fx.seq_len, 8)?;
    let detail = format!("random K=8 {pr:.3} vs K=1 {p1:.3}");
    ensure(pr >= p1, || detail.clone())?;
    Ok(detail)
}

fn sparse_ensemble(fx: &Fixture) -> Outcome {
    let dense = ensemble_ppl(&fx.dense, &fx.split.eval, fx.seq_len, 1)?;
    let top1 = ensemble_ppl(&fx.k8, &fx.split.eval, fx.seq_len, 1)?;
    let top2 = ensemble_ppl(&fx.k8, &fx.split.eval, fx.seq_len, 2)?;
    let full = ensemble_ppl(&fx.k8, &fx.split.eval, fx.seq_len, 8)?;
    let rel = (top2 - full).abs() / full;
    let detail = format!(
        "dense {dense:.3}, top-1 {top1:.3}, top-2 {top2:.3}, full {full:.3}, top-2 gap {:.2}%",
        100.0 * rel
    );
    ensure(top1 < dense && rel <= 0.02, || detail.clone())?;
    Ok(detail)
}

fn specialization(fx: &Fixture) -> Outcome {
    let m = specialization_matrix(&fx.k8, &fx.split.eval, fx.seq_len).map_err(|e| e.to_string())?;
    let k = m.len();
    for (c, row) in m.iter().enumerate() {
        ensure(row[c] == 1.0, || format!("diagonal entry {c} is {}", row[c]))?;
    }
    let off: Vec<f64> = (0..k).flat_map(|e| (0..k).filter(move |&c| c != e).map(move |c| (e, c))).map(|(e, c)| m[e][c]).collect();
    let above = off.iter().filter(|&&r| r >= 1.0).count();
    let share = above as f64 / off.len() as f64;
    let detail = format!("diagonal 1, {above}/{} off-diagonal ratios >= 1", off.len());
    ensure(share >= 0.95, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 9. Skewed data
// ---------------------------------------------------------------------------

fn skewed_sizes() -> Outcome {
    let mut spec = SyntheticSpec::new(8, 100, 9);
    spec.skew = Some(vec![8.0, 4.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    let corpus = cbtm::corpus::generate_synthetic(&spec).map_err(|e| e.to_string())?.corpus;
    let config = EmbedConfig {
        dim: EMBED_DIM,
        ..Default::default()
    };
    let provenance = FitProvenance {
        shard: "skewed corpus".into(),
        seed: 9,
        documents: corpus.len(),
    };
    let pipeline = EmbedPipeline::fit(corpus.documents(), &config, provenance).map_err(|e| e.to_string())?;
    let emb = pipeline.embed_all(corpus.documents());
    let kcfg = KMeansConfig {
        seed: 9,
        ..Default::default()
    };
    let (_, balanced) = fit_balanced_kmeans(&emb, 8, &kcfg).map_err(|e| e.to_string())?;
    let (_, unbalanced) = fit_unbalanced_kmeans(&emb, 8, &kcfg).map_err(|e| e.to_string())?;
    let b = cluster_size_stats(&balanced).map_err(|e| e.to_string())?;
    let u = cluster_size_stats(&unbalanced).map_err(|e| e.to_string())?;
    let ratio = u.max as f64 / u.min.max(1) as f64;
    let detail = format!(
        "balanced sizes {:?} (range {}), unbalanced {:?} (max/min {ratio:.2})",
        b.sizes, b.range, u.sizes
    );
    ensure(b.range <= 1 && ratio >= 2.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 10-11. Model oracles
// ---------------------------------------------------------------------------

fn full_batch(rows: Vec<Vec<u32>>) -> SequenceBatch {
    let seq_len = rows[0].len();
    SequenceBatch {
        seq_len,
        mask: rows.iter().map(|r| vec![true; r.len()]).collect(),
        doc_of: rows.iter().map(|r| vec![Some(0); r.len()]).collect(),
        rows,
    }
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_lib: f64 = 0.0;
    for i in 0..20 {
        let v = rng.gen_range(4..=12);
        let (e, h, c) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=3));
        let model = NeuralModel::new(v, e, h, c, rng.gen()).map_err(|e| e.to_string())?;
        let len = rng.gen_range(2..=6);
        let rows: Vec<Vec<u32>> = (0..rng.gen_range(1..=3))
            .map(|_| (0..len).map(|_| rng.gen_range(0..v as u32)).collect())
            .collect();
        let batch = full_batch(rows);
        let analytic = model.gradient(&batch);
        for (p, &a) in analytic.iter().enumerate() {
            let mut up = model.clone();
            up.params_mut()[p] += eps;
            let mut down = model.clone();
            down.params_mut()[p] -= eps;
            let numeric = (up.loss(&batch) - down.loss(&batch)) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        worst_lib = worst_lib.max(grad_check(&model, &batch, eps));
        ensure(worst <= 1e-4 && worst_lib <= 1e-4, || {
            format!("configuration {i} (V={v}, e={e}, h={h}, c={c}): relative error {worst:e} / {worst_lib:e}")
        })?;
    }
    Ok(format!("20 configurations, max relative error {:.1e}", worst.max(worst_lib)))
}

fn ngram_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    for i in 0..50 {
        let v = rng.gen_range(3..=40);
        let order = rng.gen_range(1..=5);
        let len = rng.gen_range(1..=10_000);
        let stream: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
        let mut model = NGramModel::new(v, order, None, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
        let mut pos = 0;
        while pos < len {
            let end = (pos + rng.gen_range(1..=700)).min(len);
            model.count_continuation(&stream[..pos], &stream[pos..end]);
            pos = end;
        }
        ensure(recount_oracle(&model, &stream), || format!("stream {i}: incremental tables differ from a recount"))?;
        let mut naive: HashMap<(Vec<u32>, u32), u64> = HashMap::new();
        for t in 0..len {
            for n in 0..order.min(t + 1) {
                *naive.entry((stream[t - n..t].to_vec(), stream[t])).or_insert(0) += 1;
            }
        }
        for ((ctx, w), count) in &naive {
            ensure(model.count(ctx, *w) == *count, || {
                format!("stream {i}: count({ctx:?}, {w}) = {} but {count} occurrences", model.count(ctx, *w))
            })?;
        }
    }
    let uniform = NGramModel::new(16, 1, None, DEFAULT_ALPHA).map_err(|e| e.to_string())?;
    let batch = full_batch(vec![(0..16).collect(), (0..16).rev().collect()]);
    let ppl = perplexity(&uniform, &batch).map_err(|e| e.to_string())?;
    ensure(ppl == 16.0, || format!("uniform perplexity {ppl}"))?;
    Ok("50 streams bit-equal to recount; uniform |V| = 16 perplexity exactly 16".into())
}

// ---------------------------------------------------------------------------
// 12. Fault isolation and determinism
// ---------------------------------------------------------------------------

fn read_checkpoints(dir: &Path, k: usize) -> Vec<Option<Vec<u8>>> {
    (0..k).map(|j| std::fs::read(dir.join(format!("experts/{j}.ckpt"))).ok()).collect()
}

fn fault_isolation() -> Outcome {
    let split = synthetic_split(&SyntheticSpec::new(8, 60, 12), 0);
    let mut cfg = RunConfig::new(8, split.train_tokens, 21);
    cfg.embed_dim = EMBED_DIM;
    cfg.shard_size = split.train.len();
    let tmp = tempfile::tempdir().unwrap();
    let worker = env!("CARGO_BIN_EXE_cbtm");
    let digest = |name: &str, exec: &Executor| -> Result<String, String> {
        let out = run_pipeline(&split.train, &cfg, &tmp.path().join(name), exec).map_err(|e| e.to_string())?;
        ensure(out.manifest.all_done(), || format!("{name}: not every expert finished"))?;
        out.manifest.run_digest().map_err(|e| e.to_string())
    };

    let serial = digest("serial", &Executor::serial())?;
    let threads = digest("threads", &Executor::threads(4))?;
    let processes = digest("processes", &Executor::processes(worker, 4))?;
    ensure(serial == threads && serial == processes, || "serial and parallel digests differ".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    for s in 0..5 {
        let mut order: Vec<usize> = (0..8).collect();
        order.shuffle(&mut rng);
        let exec = Executor {
            order: Some(order.clone()),
            ..Executor::threads(3)
        };
        let d = digest(&format!("shuffle{s}"), &exec)?;
        ensure(d == serial, || format!("order {order:?} changes the run digest"))?;
    }

    let dir = tmp.path().join("killed");
    let victim = 5;
    let exec = Executor {
        inject_failure: vec![victim],
        ..Executor::processes(worker, 4)
    };
    let first = run_pipeline(&split.train, &cfg, &dir, &exec).map_err(|e| e.to_string())?;
    let failed: Vec<usize> = first
        .manifest
        .records
        .iter()
        .filter(|r| r.status != JobStatus::Done)
        .map(|r| r.cluster)
        .collect();
    ensure(failed == [victim], || format!("failed experts after the kill: {failed:?}"))?;
    let before = read_checkpoints(&dir, 8);
    let resumed = resume(&dir, &Executor::processes(worker, 4)).map_err(|e| e.to_string())?;
    ensure(resumed.trained == [victim], || format!("resume retrained {:?}", resumed.trained))?;
    let after = read_checkpoints(&dir, 8);
    for j in (0..8).filter(|&j| j != victim) {
        ensure(before[j].is_some() && before[j] == after[j], || format!("checkpoint {j} changed on resume"))?;
    }
    let resumed_digest = resumed.manifest.run_digest().map_err(|e| e.to_string())?;
    ensure(resumed_digest == serial, || "resumed run differs from an uninterrupted one".into())?;
    Ok(format!(
        "killed expert {victim}, resume retrained only it, 7 checkpoints byte-identical; serial, thread, process, 5 shuffled and resumed runs share digest {}",
        &serial[..12]
    ))
}

// ---------------------------------------------------------------------------
// 13. Performance routing
// ---------------------------------------------------------------------------

fn performance_routing() -> Outcome {
    let w = softmax_accuracies(&[1.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    let e1 = std::f64::consts::E;
    ensure(
        (w[0] - 0.731059).abs() <= 1e-6 && (w[1] - 0.268941).abs() <= 1e-6 && (w[0] - e1 / (e1 + 1.0)).abs() <= 1e-12,
        || format!("softmax {w:?}"),
    )?;
    let p = ema_step(&[0.5, 0.5], &w, 0.5);
    ensure((p[0] - 0.615529).abs() <= 1e-6 && (p[1] - 0.384471).abs() <= 1e-6, || format!("EMA step {p:?}"))?;

    let docs = vec![
        Document::new("a", "apple apple pear yes", None),
        Document::new("b", "stone rock gravel no", None),
    ];
    let corpus = Corpus::new(docs.clone(), Provenance::Derived { from: "toy".into() }).map_err(|e| e.to_string())?;
    let vocab: Vocab = build_vocab(&corpus, 100).map_err(|e| e.to_string())?;
    let experts: Vec<ExpertModel> = docs
        .iter()
        .map(|d| {
            let mut m = ExpertModel::Ngram(NGramModel::new(vocab.len(), 2, None, DEFAULT_ALPHA).unwrap());
            let batch = pack_documents(std::slice::from_ref(d), &vocab, 8).unwrap();
            let schedule = TrainSchedule {
                steps: 1,
                batch_size: batch.rows.len(),
                ..Default::default()
            };
            m.train(&batch, &schedule).unwrap();
            m
        })
        .collect();
    let refs: Vec<&dyn LanguageModel> = experts.iter().map(|m| m as &dyn LanguageModel).collect();
    let ex = |text: &str, label: &str| FewShotExample {
        text: text.into(),
        label: label.into(),
    };
    let task = FewShotTask {
        labels: vec!["fruit".into(), "mineral".into()],
        verbalizers: [("fruit".to_string(), "yes".to_string()), ("mineral".to_string(), "no".to_string())]
            .into_iter()
            .collect(),
        demonstrations: vec![ex("apple", "fruit")],
        test: vec![ex("pear", "fruit"), ex("rock", "mineral"), ex("gravel", "mineral"), ex("apple pear", "fruit")],
    };
    let trace = perf_route_updating(&refs, &vocab, &task, 0.0, 1.0).map_err(|e| e.to_string())?;
    ensure(
        trace.trajectory.len() == task.test.len() + 1 && trace.trajectory.iter().all(|p| p == &[0.5, 0.5]),
        || format!("α = 0 trajectory {:?}", trace.trajectory),
    )?;
    Ok(format!(
        "softmax [{:.6}, {:.6}], EMA [{:.6}, {:.6}], α = 0 stays uniform over {} steps",
        w[0],
        w[1],
        p[0],
        p[1],
        task.test.len()
    ))
}

// ---------------------------------------------------------------------------
// 14. Cached second half
// ---------------------------------------------------------------------------

fn cached_second_half() -> Outcome {
    let split = synthetic_split(&SyntheticSpec::new(2, 300, 14), 100);
    let mut cfg = RunConfig::new(2, split.train_tokens, 3);
    cfg.embed_dim = EMBED_DIM;
    let tmp = tempfile::tempdir().unwrap();
    let col = run_pipeline(&split.train, &cfg, tmp.path(), &Executor::threads(2))
        .map_err(|e| e.to_string())?
        .collection
        .ok_or("run did not finish")?;
    let ens = col.ensemble().map_err(|e| e.to_string())?;
    let batch = pack_documents(&split.eval, &col.vocab, cfg.seq_len).map_err(|e| e.to_string())?;
    let per_token = eval_ensemble_ppl(&ens, &batch, TEMPERATURE, 2, CachePolicy::PerToken).map_err(|e| e.to_string())?;
    let frozen = eval_ensemble_ppl(&ens, &batch, TEMPERATURE, 2, CachePolicy::FreezeHalf).map_err(|e| e.to_string())?;
    let rel = (frozen - per_token).abs() / per_token;
    let detail = format!("per-token {per_token:.3}, freeze-half {frozen:.3}, gap {:.2}%", 100.0 * rel);
    ensure(rel <= 0.02, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    let zero = Duration::ZERO;
    suite.run(1, "balanced assignment optimality", secs(10), zero, balanced_assignment);
    suite.run(2, "FLOP formula", secs(1), zero, flop_formula);
    suite.run(3, "cost interpolation", secs(1), zero, interpolation);
    suite.run(4, "ensemble weights", secs(1), zero, routing_weights);
    let fx = fixture();
    suite.run(5, "more clusters, lower perplexity", secs(300), fx.build, || scaling_direction(fx));
    suite.run(6, "random clusters do not help", secs(300), fx.build, || random_clusters(fx));
    suite.run(7, "sparse ensembles", secs(300), fx.build, || sparse_ensemble(fx));
    suite.run(8, "expert specialization", secs(300), fx.build, || specialization(fx));
    suite.run(9, "cluster sizes on skewed data", secs(60), zero, skewed_sizes);
    suite.run(10, "neural gradient check", secs(30), zero, gradient_check);
    suite.run(11, "n-gram count oracle", secs(30), zero, ngram_oracle);
    suite.run(12, "fault isolation and determinism", secs(300), zero, fault_isolation);
    suite.run(13, "performance routing", secs(1), zero, performance_routing);
    suite.run(14, "cached second-half routing", secs(120), zero, cached_second_half);
    if suite.failed.is_empty() {
        println!("acceptance: all 14 criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", suite.failed);
        std::process::exit(1);
    }
}
