//! Inference over a collection of experts.
//!
//! Ensemble weights come from the squared distance between the embedding of
//! the running context and each cluster center, sharpened by a temperature
//! and truncated to the `k_active` nearest experts. The next-token
//! distribution is the weight-mixture of the active experts.
//!
//! The module also carries the few-shot classification harness and the
//! performance-based routing variants.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::squared_distance;
use crate::corpus::{SequenceBatch, Vocab};
use crate::embed::EmbedPipeline;
use crate::error::{Error, Result};
use crate::lm::{ppl_from_bits, to_bits, LanguageModel};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TEMPERATURE_GRID: [f64; 7] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];
pub const DEFAULT_ROUTE_TAU: f64 = 1.0;
pub const DEFAULT_EMA_ALPHA: f64 = 0.3;
pub const DEFAULT_PERMUTATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    /// Probability of every expert; zero outside the active set.
    pub probs: Vec<f64>,
    /// Surviving experts, nearest first.
    pub active: Vec<usize>,
    pub temperature: f64,
    pub k_active: usize,
}

impl EnsembleWeights {
    pub fn one_hot(k: usize, expert: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[expert] = 1.0;
        EnsembleWeights {
            probs,
            active: vec![expert],
            temperature: 0.0,
            k_active: 1,
        }
    }

    pub fn dense(probs: Vec<f64>, temperature: f64) -> Self {
        let k = probs.len();
        EnsembleWeights {
            active: (0..k).collect(),
            probs,
            temperature,
            k_active: k,
        }
    }

    pub fn uniform(k: usize) -> Self {
        Self::dense(vec![1.0 / k as f64; k], f64::INFINITY)
    }

    pub fn nonzero(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }
}

/// Weights from squared distances: `w_j ∝ exp(-d²_j / T)` over the
/// `k_active` smallest distances (ties kept by lower index), renormalized.
///
/// Exponents are shifted by the smallest squared distance, which leaves the
/// normalized weights unchanged and keeps the nearest expert's term at 1, so
/// the sum never underflows. As `T → 0` this is one-hot on the nearest center.
pub fn weights_from_sq_distances(d2: &[f64], temperature: f64, k_active: usize) -> Result<EnsembleWeights> {
    let k = d2.len();
    if k == 0 {
        return Err(Error::InvalidConfig("no experts to route between".into()));
    }
    if !(temperature > 0.0) || temperature.is_nan() {
        return Err(Error::InvalidConfig(format!("temperature {temperature} must be > 0")));
    }
    if k_active == 0 || k_active > k {
        return Err(Error::InvalidConfig(format!("k_active = {k_active} must be in 1..={k}")));
    }
    if d2.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("routing distances".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(a.cmp(&b)));
    order.truncate(k_active);
    let min = d2[order[0]];
    let mut probs = vec![0.0; k];
    let mut total = 0.0;
    for &j in &order {
        let w = (-(d2[j] - min) / temperature).exp();
        probs[j] = w;
        total += w;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(EnsembleWeights {
        probs,
        active: order,
        temperature,
        k_active,
    })
}

pub fn ensemble_weights(
    embedding: &[f64],
    centers: &[Vec<f64>],
    temperature: f64,
    k_active: usize,
) -> Result<EnsembleWeights> {
    if centers.iter().any(|c| c.len() != embedding.len()) {
        return Err(Error::InvalidConfig("embedding and center dimensions differ".into()));
    }
    let d2: Vec<f64> = centers.iter().map(|c| squared_distance(embedding, c)).collect();
    weights_from_sq_distances(&d2, temperature, k_active)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `log Σ_j p(D=j) · p_j(token | context)` over the active experts. A single
/// active expert yields its own log-probability unchanged.
pub fn mixture_token_logprob(
    experts: &[&dyn LanguageModel],
    weights: &EnsembleWeights,
    context: &[u32],
    token: u32,
) -> f64 {
    log_sum_exp(
        weights
            .active
            .iter()
            .filter(|&&j| weights.probs[j] > 0.0)
            .map(|&j| weights.probs[j].ln() + experts[j].token_logprob(context, token)),
    )
}

/// Full mixture distribution, as probabilities.
pub fn mixture_next_token(
    experts: &[&dyn LanguageModel],
    weights: &EnsembleWeights,
    context: &[u32],
) -> Vec<f64> {
    let v = experts[0].vocab_size();
    let mut out = vec![0.0; v];
    for &j in &weights.active {
        let w = weights.probs[j];
        if w == 0.0 {
            continue;
        }
        for (o, lp) in out.iter_mut().zip(experts[j].next_token_logprobs(context)) {
            *o += w * lp.exp();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Recompute the weights before every token.
    PerToken,
    /// Recompute until the document's midpoint, then keep the last weights.
    FreezeHalf,
}

impl std::str::FromStr for CachePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_token" | "per-token" => Ok(CachePolicy::PerToken),
            "freeze_half" | "freeze-half" => Ok(CachePolicy::FreezeHalf),
            other => Err(Error::InvalidConfig(format!("unknown cache policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CachePolicy::PerToken => "per_token",
            CachePolicy::FreezeHalf => "freeze_half",
        })
    }
}

/// Experts plus what is needed to route between them.
pub struct Ensemble<'a> {
    pub experts: Vec<&'a dyn LanguageModel>,
    pub centers: &'a [Vec<f64>],
    pub pipeline: &'a EmbedPipeline,
    /// Route on the last `window` tokens only; `None` uses the full history.
    pub window: Option<usize>,
    feature_of_id: Vec<Option<usize>>,
}

impl<'a> Ensemble<'a> {
    pub fn new(
        experts: Vec<&'a dyn LanguageModel>,
        centers: &'a [Vec<f64>],
        pipeline: &'a EmbedPipeline,
        vocab: &Vocab,
    ) -> Result<Self> {
        if experts.is_empty() || experts.len() != centers.len() {
            return Err(Error::InvalidConfig(format!(
                "{} experts for {} centers",
                experts.len(),
                centers.len()
            )));
        }
        if experts.iter().any(|e| e.vocab_size() != vocab.len()) {
            return Err(Error::Integrity("expert vocabulary size differs from the vocabulary".into()));
        }
        if centers.iter().any(|c| c.len() != pipeline.dim()) {
            return Err(Error::Integrity("center dimension differs from the embedding".into()));
        }
        let feature_of_id = (0..vocab.len() as u32)
            .map(|id| {
                if id == Vocab::BOD_ID || id == Vocab::UNK_ID || id == Vocab::PAD_ID {
                    None
                } else {
                    pipeline.tfidf.feature_of(vocab.token(id))
                }
            })
            .collect();
        Ok(Ensemble {
            experts,
            centers,
            pipeline,
            window: None,
            feature_of_id,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn weights_for_counts(
        &self,
        counts: &BTreeMap<usize, f64>,
        temperature: f64,
        k_active: usize,
    ) -> Result<EnsembleWeights> {
        ensemble_weights(&self.pipeline.embed_counts(counts), self.centers, temperature, k_active)
    }

    /// Weights for a token history (special tokens are ignored).
    pub fn weights_for_history(&self, history: &[u32], temperature: f64, k_active: usize) -> Result<EnsembleWeights> {
        let start = self.window.map_or(0, |w| history.len().saturating_sub(w));
        let mut counts = BTreeMap::new();
        for &t in &history[start..] {
            if let Some(f) = self.feature_of_id[t as usize] {
                *counts.entry(f).or_insert(0.0) += 1.0;
            }
        }
        self.weights_for_counts(&counts, temperature, k_active)
    }

    /// Negative log2-likelihood sum and count over the scored positions of
    /// `batch`. The routing history of a position is every earlier token of
    /// its document, across row boundaries.
    pub fn nll_bits(&self, batch: &SequenceBatch, temperature: f64, k_active: usize, policy: CachePolicy) -> Result<(f64, usize)> {
        // Validate once up front so the loop below cannot fail on parameters.
        weights_from_sq_distances(&vec![0.0; self.k()], temperature, k_active)?;
        let mut doc_len: BTreeMap<usize, usize> = BTreeMap::new();
        for (row, docs) in batch.rows.iter().zip(&batch.doc_of) {
            for (&tok, d) in row.iter().zip(docs) {
                if let Some(d) = d {
                    if tok != Vocab::BOD_ID {
                        *doc_len.entry(*d).or_insert(0) += 1;
                    }
                }
            }
        }

        let mut current: Option<usize> = None;
        let mut history: Vec<u32> = Vec::new();
        let mut frozen: Option<EnsembleWeights> = None;
        let mut bits = 0.0;
        let mut n = 0usize;
        for (r, row) in batch.rows.iter().enumerate() {
            for t in 0..row.len() {
                let Some(doc) = batch.doc_of[r][t] else { continue };
                if !batch.mask[r][t] {
                    continue;
                }
                if current != Some(doc) || row[t] == Vocab::BOD_ID {
                    current = Some(doc);
                    history.clear();
                    frozen = None;
                }
                if t > 0 {
                    let len = doc_len.get(&doc).copied().unwrap_or(0);
                    let weights = match (&frozen, policy) {
                        (Some(w), CachePolicy::FreezeHalf) if 2 * history.len() > len => w.clone(),
                        _ => {
                            let w = self.weights_for_history(&history, temperature, k_active)?;
                            frozen = Some(w.clone());
                            w
                        }
                    };
                    bits += to_bits(mixture_token_logprob(&self.experts, &weights, &row[..t], row[t]));
                    n += 1;
                }
                if row[t] != Vocab::BOD_ID {
                    history.push(row[t]);
                }
            }
        }
        Ok((bits, n))
    }
}

pub fn eval_ensemble_ppl(
    ensemble: &Ensemble,
    batch: &SequenceBatch,
    temperature: f64,
    k_active: usize,
    policy: CachePolicy,
) -> Result<f64> {
    let (bits, n) = ensemble.nll_bits(batch, temperature, k_active, policy)?;
    ppl_from_bits(bits, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub k_active: usize,
    pub ppl: f64,
}

pub fn temperature_sweep(
    ensemble: &Ensemble,
    batch: &SequenceBatch,
    temperatures: &[f64],
    k_grid: &[usize],
    policy: CachePolicy,
) -> Result<Vec<SweepRow>> {
    if temperatures.is_empty() || k_grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grids must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(temperatures.len() * k_grid.len());
    for &temperature in temperatures {
        for &k_active in k_grid {
            let ppl = eval_ensemble_ppl(ensemble, batch, temperature, k_active, policy)?;
            rows.push(SweepRow {
                temperature,
                k_active,
                ppl,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["T", "k_active", "ppl"])?;
    for r in rows {
        w.write_record([r.temperature.to_string(), r.k_active.to_string(), r.ppl.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Few-shot classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    /// Candidate labels in tie-breaking order.
    pub labels: Vec<String>,
    /// Text appended after an example to express each label.
    pub verbalizers: BTreeMap<String, String>,
    pub demonstrations: Vec<FewShotExample>,
    pub test: Vec<FewShotExample>,
}

impl FewShotTask {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidConfig("task has no labels".into()));
        }
        for l in &self.labels {
            if !self.verbalizers.contains_key(l) {
                return Err(Error::InvalidConfig(format!("label {l:?} has no verbalizer")));
            }
        }
        for ex in self.demonstrations.iter().chain(&self.test) {
            if !self.labels.contains(&ex.label) {
                return Err(Error::InvalidConfig(format!("unknown label {:?}", ex.label)));
            }
        }
        if self.test.iter().any(|t| self.demonstrations.contains(t)) {
            return Err(Error::InvalidConfig("test examples overlap the demonstrations".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let task: FewShotTask = serde_json::from_slice(&bytes)?;
        task.validate()?;
        Ok(task)
    }

    fn verbalizer(&self, label: &str) -> &str {
        &self.verbalizers[label]
    }
}

/// `[BOD] demo₁ verbalizer₁ … demoₙ verbalizerₙ example`.
pub fn build_prompt(vocab: &Vocab, task: &FewShotTask, demos: &[FewShotExample], text: &str) -> Vec<u32> {
    let mut ids = vec![Vocab::BOD_ID];
    for d in demos {
        ids.extend(vocab.encode(&d.text));
        ids.extend(vocab.encode(task.verbalizer(&d.label)));
    }
    ids.extend(vocab.encode(text));
    ids
}

/// Mixture log-probability of each label's verbalizer after `prompt`.
pub fn label_scores(
    experts: &[&dyn LanguageModel],
    weights: &EnsembleWeights,
    vocab: &Vocab,
    task: &FewShotTask,
    prompt: &[u32],
) -> Vec<f64> {
    task.labels
        .iter()
        .map(|l| {
            let mut ctx = prompt.to_vec();
            let mut score = 0.0;
            for tok in vocab.encode(task.verbalizer(l)) {
                score += mixture_token_logprob(experts, weights, &ctx, tok);
                ctx.push(tok);
            }
            score
        })
        .collect()
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Index (into `task.labels`) of the highest-scoring label; ties go to the
/// earliest label.
pub fn classify_fewshot(
    experts: &[&dyn LanguageModel],
    weights: &EnsembleWeights,
    vocab: &Vocab,
    task: &FewShotTask,
    demos: &[FewShotExample],
    text: &str,
) -> usize {
    let prompt = build_prompt(vocab, task, demos, text);
    argmax_first(&label_scores(experts, weights, vocab, task, &prompt))
}

/// Classification accuracy over `examples`, with `weights` for every example
/// or, when absent, weights routed from each prompt.
pub fn fewshot_accuracy(
    ensemble: &Ensemble,
    vocab: &Vocab,
    task: &FewShotTask,
    weights: Option<&EnsembleWeights>,
    temperature: f64,
    k_active: usize,
) -> Result<f64> {
    if task.test.is_empty() {
        return Err(Error::EmptyInput("task has no test examples".into()));
    }
    let mut correct = 0;
    for ex in &task.test {
        let prompt = build_prompt(vocab, task, &task.demonstrations, &ex.text);
        let routed;
        let w = match weights {
            Some(w) => w,
            None => {
                routed = ensemble.weights_for_history(&prompt, temperature, k_active)?;
                &routed
            }
        };
        let pred = argmax_first(&label_scores(&ensemble.experts, w, vocab, task, &prompt));
        if task.labels[pred] == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.test.len() as f64)
}

// ---------------------------------------------------------------------------
// Performance routing
// ---------------------------------------------------------------------------

/// `softmax(accuracies / τ)`.
pub fn softmax_accuracies(accuracies: &[f64], tau: f64) -> Result<Vec<f64>> {
    if accuracies.is_empty() {
        return Err(Error::InvalidConfig("no experts".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("softmax temperature {tau} must be > 0")));
    }
    let max = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = accuracies.iter().map(|a| ((a - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// `(1 - α)·p + α·target`.
pub fn ema_step(p: &[f64], target: &[f64], alpha: f64) -> Vec<f64> {
    p.iter().zip(target).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
}

fn expert_correct(
    experts: &[&dyn LanguageModel],
    vocab: &Vocab,
    task: &FewShotTask,
    demos: &[FewShotExample],
    example: &FewShotExample,
) -> Vec<f64> {
    let k = experts.len();
    (0..k)
        .map(|j| {
            let pred = classify_fewshot(experts, &EnsembleWeights::one_hot(k, j), vocab, task, demos, &example.text);
            f64::from(task.labels[pred] == example.label)
        })
        .collect()
}

/// Accuracy of each expert on validation examples (each prefixed by all
/// demonstrations), turned into fixed weights with a softmax.
pub fn perf_route_fixed_val(
    experts: &[&dyn LanguageModel],
    vocab: &Vocab,
    task: &FewShotTask,
    validation: &[FewShotExample],
    tau: f64,
) -> Result<EnsembleWeights> {
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation set is empty".into()));
    }
    if validation.iter().any(|v| task.demonstrations.contains(v)) {
        return Err(Error::InvalidConfig("validation examples overlap the demonstrations".into()));
    }
    let mut acc = vec![0.0; experts.len()];
    for ex in validation {
        for (a, c) in acc.iter_mut().zip(expert_correct(experts, vocab, task, &task.demonstrations, ex)) {
            *a += c;
        }
    }
    acc.iter_mut().for_each(|a| *a /= validation.len() as f64);
    Ok(EnsembleWeights::dense(softmax_accuracies(&acc, tau)?, tau))
}

/// Demonstrations only: in each of `permutations` seeded shuffles the last
/// demonstration is held out and classified from the others.
pub fn perf_route_fixed_demos(
    experts: &[&dyn LanguageModel],
    vocab: &Vocab,
    task: &FewShotTask,
    permutations: usize,
    seed: u64,
    tau: f64,
) -> Result<EnsembleWeights> {
    if task.demonstrations.len() < 2 {
        return Err(Error::InvalidConfig("need at least two demonstrations".into()));
    }
    if permutations == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; experts.len()];
    for _ in 0..permutations {
        let mut demos = task.demonstrations.clone();
        demos.shuffle(&mut rng);
        let held = demos.pop().expect("at least two demonstrations");
        for (a, c) in acc.iter_mut().zip(expert_correct(experts, vocab, task, &demos, &held)) {
            *a += c;
        }
    }
    acc.iter_mut().for_each(|a| *a /= permutations as f64);
    Ok(EnsembleWeights::dense(softmax_accuracies(&acc, tau)?, tau))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdatingTrace {
    /// Weights before the first example, then after each example.
    pub trajectory: Vec<Vec<f64>>,
    /// Label index predicted for each test example with the weights held
    /// at that point.
    pub predictions: Vec<usize>,
}

/// Starts uniform and, after each test example, moves the weights toward the
/// softmax of the experts' correctness on it.
pub fn perf_route_updating(
    experts: &[&dyn LanguageModel],
    vocab: &Vocab,
    task: &FewShotTask,
    alpha: f64,
    tau: f64,
) -> Result<UpdatingTrace> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("EMA decay {alpha} outside [0, 1]")));
    }
    let k = experts.len();
    let mut p = vec![1.0 / k as f64; k];
    let mut trace = UpdatingTrace {
        trajectory: vec![p.clone()],
        predictions: Vec::new(),
    };
    for ex in &task.test {
        let w = EnsembleWeights::dense(p.clone(), tau);
        trace
            .predictions
            .push(classify_fewshot(experts, &w, vocab, task, &task.demonstrations, &ex.text));
        let target = softmax_accuracies(&expert_correct(experts, vocab, task, &task.demonstrations, ex), tau)?;
        p = ema_step(&p, &target, alpha);
        trace.trajectory.push(p.clone());
    }
    Ok(trace)
}
