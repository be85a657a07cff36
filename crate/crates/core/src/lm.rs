//! Expert language models.
//!
//! Two backends share the [`LanguageModel`] interface: an interpolated
//! n-gram model whose counts can be checked exactly, and a small neural
//! model (embeddings → tanh hidden layer → softmax) trained with SGD.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{pack_documents, Document, SequenceBatch, Vocab};
use crate::error::{Error, Result};
use crate::store;

const CHECKPOINT_VERSION: &str = "cbtm-expert/1";
pub const DEFAULT_ALPHA: f64 = 0.01;

/// Next-token distributions over a fixed vocabulary, in natural-log space.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64>;

    fn token_logprob(&self, context: &[u32], token: u32) -> f64 {
        self.next_token_logprobs(context)[token as usize]
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Ngram {
        order: usize,
        /// Interpolation weights, lowest order first. Uniform when absent.
        #[serde(default)]
        lambdas: Option<Vec<f64>>,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Neural {
        emb_dim: usize,
        hidden: usize,
        context: usize,
    },
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl ModelSpec {
    pub fn ngram(order: usize) -> Self {
        ModelSpec::Ngram {
            order,
            lambdas: None,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn neural() -> Self {
        ModelSpec::Neural {
            emb_dim: 32,
            hidden: 64,
            context: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: usize,
    /// Rows per step.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            steps: 100,
            batch_size: 8,
            peak_lr: 0.5,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch size must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be > 0", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Linear decay from the peak to zero, no warmup.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.peak_lr * (1.0 - step as f64 / self.steps as f64)
    }

    /// Rows consumed by `step` (cycling through the batch).
    pub fn rows_for_step(&self, step: usize, n_rows: usize) -> impl Iterator<Item = usize> {
        let start = step * self.batch_size;
        (start..start + self.batch_size).map(move |i| i % n_rows)
    }
}

/// Per-step loss and wall time of one training call.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub tokens: u64,
}

// ---------------------------------------------------------------------------
// N-gram backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Jelinek-Mercer interpolation of an add-α unigram with relative-frequency
/// estimates of orders 2..=n. An unseen context of order i falls back to the
/// order i-1 estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NGramState", try_from = "NGramState")]
pub struct NGramModel {
    order: usize,
    lambdas: Vec<f64>,
    alpha: f64,
    vocab_size: usize,
    unigram: Vec<u64>,
    total: u64,
    /// `tables[i]` holds contexts of length `i + 1`.
    tables: Vec<HashMap<Vec<u32>, ContextCounts>>,
}

#[derive(Serialize, Deserialize)]
struct NGramState {
    order: usize,
    lambdas: Vec<f64>,
    alpha: f64,
    vocab_size: usize,
    unigram: Vec<u64>,
    tables: Vec<Vec<(Vec<u32>, Vec<(u32, u64)>)>>,
}

impl From<NGramModel> for NGramState {
    fn from(m: NGramModel) -> Self {
        let tables = m
            .tables
            .iter()
            .map(|t| {
                let mut rows: Vec<_> = t
                    .iter()
                    .map(|(ctx, c)| {
                        let mut next: Vec<(u32, u64)> = c.next.iter().map(|(&w, &n)| (w, n)).collect();
                        next.sort_unstable();
                        (ctx.clone(), next)
                    })
                    .collect();
                rows.sort_unstable();
                rows
            })
            .collect();
        NGramState {
            order: m.order,
            lambdas: m.lambdas,
            alpha: m.alpha,
            vocab_size: m.vocab_size,
            unigram: m.unigram,
            tables,
        }
    }
}

impl TryFrom<NGramState> for NGramModel {
    type Error = String;
    fn try_from(s: NGramState) -> std::result::Result<Self, String> {
        let mut m = NGramModel::new(s.vocab_size, s.order, Some(s.lambdas), s.alpha)
            .map_err(|e| e.to_string())?;
        if s.unigram.len() != s.vocab_size || s.tables.len() + 1 != s.order {
            return Err("count tables do not match order and vocabulary".into());
        }
        m.total = s.unigram.iter().sum();
        m.unigram = s.unigram;
        for (i, rows) in s.tables.into_iter().enumerate() {
            for (ctx, next) in rows {
                if ctx.len() != i + 1 {
                    return Err(format!("context of length {} in order-{} table", ctx.len(), i + 2));
                }
                let entry = m.tables[i].entry(ctx).or_default();
                for (w, n) in next {
                    if w as usize >= m.vocab_size {
                        return Err(format!("token id {w} outside vocabulary"));
                    }
                    entry.total += n;
                    *entry.next.entry(w).or_insert(0) += n;
                }
            }
        }
        Ok(m)
    }
}

impl NGramModel {
    pub fn new(vocab_size: usize, order: usize, lambdas: Option<Vec<f64>>, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidConfig("n-gram order must be >= 1".into()));
        }
        if vocab_size == 0 {
            return Err(Error::InvalidConfig("empty vocabulary".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} must be >= 0")));
        }
        let lambdas = lambdas.unwrap_or_else(|| vec![1.0 / order as f64; order]);
        if lambdas.len() != order || lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "need {order} nonnegative interpolation weights, got {lambdas:?}"
            )));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("interpolation weights sum to {sum}, not 1")));
        }
        Ok(NGramModel {
            order,
            lambdas,
            alpha,
            vocab_size,
            unigram: vec![0; vocab_size],
            total: 0,
            tables: vec![HashMap::new(); order - 1],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn total_tokens(&self) -> u64 {
        self.total
    }

    pub fn unigram_count(&self, token: u32) -> u64 {
        self.unigram[token as usize]
    }

    /// Count of `token` after `context` (any length below the order).
    pub fn count(&self, context: &[u32], token: u32) -> u64 {
        if context.is_empty() {
            return self.unigram_count(token);
        }
        self.tables
            .get(context.len() - 1)
            .and_then(|t| t.get(context))
            .and_then(|c| c.next.get(&token))
            .copied()
            .unwrap_or(0)
    }

    /// Counts every position of `chunk`, using the tail of `history` as
    /// context for the first positions.
    pub fn count_continuation(&mut self, history: &[u32], chunk: &[u32]) {
        let keep = history.len().min(self.order - 1);
        let mut buf: Vec<u32> = history[history.len() - keep..].to_vec();
        let offset = buf.len();
        buf.extend_from_slice(chunk);
        for t in offset..buf.len() {
            let w = buf[t];
            self.unigram[w as usize] += 1;
            self.total += 1;
            for len in 1..self.order.min(t + 1) {
                let ctx = buf[t - len..t].to_vec();
                let c = self.tables[len - 1].entry(ctx).or_default();
                c.total += 1;
                *c.next.entry(w).or_insert(0) += 1;
            }
        }
    }

    pub fn count_sequence(&mut self, seq: &[u32]) {
        self.count_continuation(&[], seq);
    }

    fn token_prob(&self, context: &[u32], token: u32) -> f64 {
        let v = self.vocab_size as f64;
        let mut p = (self.unigram[token as usize] as f64 + self.alpha) / (self.total as f64 + self.alpha * v);
        let mut mix = self.lambdas[0] * p;
        for len in 1..self.order {
            if len <= context.len() {
                let ctx = &context[context.len() - len..];
                if let Some(c) = self.tables[len - 1].get(ctx) {
                    p = c.next.get(&token).copied().unwrap_or(0) as f64 / c.total as f64;
                }
            }
            mix += self.lambdas[len] * p;
        }
        mix
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        (0..self.vocab_size as u32)
            .map(|w| self.token_prob(context, w).ln())
            .collect()
    }

    fn token_logprob(&self, context: &[u32], token: u32) -> f64 {
        self.token_prob(context, token).ln()
    }
}

/// Recounts `stream` from scratch and compares every table with `model`.
pub fn recount_oracle(model: &NGramModel, stream: &[u32]) -> bool {
    let mut fresh = NGramModel {
        unigram: vec![0; model.vocab_size],
        total: 0,
        tables: vec![HashMap::new(); model.order - 1],
        ..model.clone()
    };
    fresh.count_sequence(stream);
    fresh.unigram == model.unigram && fresh.total == model.total && fresh.tables == model.tables
}

// ---------------------------------------------------------------------------
// Neural backend
// ---------------------------------------------------------------------------

/// Fixed-window feed-forward model. Parameters are stored flat as
/// `[embeddings V×e | W1 (c·e)×h | b1 | W2 h×V | b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    vocab_size: usize,
    emb_dim: usize,
    hidden: usize,
    context: usize,
    params: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

struct Forward {
    window: Vec<u32>,
    x: Vec<f64>,
    hidden: Vec<f64>,
    mask: Vec<f64>,
    logprobs: Vec<f64>,
}

impl NeuralModel {
    pub fn new(vocab_size: usize, emb_dim: usize, hidden: usize, context: usize, seed: u64) -> Result<Self> {
        if vocab_size < 3 || emb_dim == 0 || hidden == 0 || context == 0 {
            return Err(Error::InvalidConfig(
                "neural model needs a vocabulary with specials and nonzero sizes".into(),
            ));
        }
        let mut m = NeuralModel {
            vocab_size,
            emb_dim,
            hidden,
            context,
            params: Vec::new(),
        };
        let lay = m.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; lay.len];
        let in_dim = (context * emb_dim) as f64;
        let fill = |slice: &mut [f64], scale: f64, rng: &mut ChaCha8Rng| {
            for p in slice {
                *p = rng.gen_range(-scale..scale);
            }
        };
        fill(&mut params[..lay.w1], 0.1, &mut rng);
        fill(&mut params[lay.w1..lay.b1], 1.0 / in_dim.sqrt(), &mut rng);
        fill(&mut params[lay.w2..lay.b2], 1.0 / (hidden as f64).sqrt(), &mut rng);
        m.params = params;
        Ok(m)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        let (v, e, h, c) = (self.vocab_size, self.emb_dim, self.hidden, self.context);
        let w1 = v * e;
        let b1 = w1 + c * e * h;
        let w2 = b1 + h;
        let b2 = w2 + h * v;
        Layout {
            w1,
            b1,
            w2,
            b2,
            len: b2 + v,
        }
    }

    fn window(&self, context: &[u32]) -> Vec<u32> {
        let mut w = vec![Vocab::PAD_ID; self.context];
        let take = context.len().min(self.context);
        w[self.context - take..].copy_from_slice(&context[context.len() - take..]);
        w
    }

    fn forward(&self, params: &[f64], context: &[u32], mask: Option<Vec<f64>>) -> Forward {
        let lay = self.layout();
        let (v, e, h) = (self.vocab_size, self.emb_dim, self.hidden);
        let window = self.window(context);
        let mut x = Vec::with_capacity(window.len() * e);
        for &t in &window {
            let t = t as usize;
            x.extend_from_slice(&params[t * e..(t + 1) * e]);
        }
        let mut hidden = params[lay.b1..lay.w2].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            let row = &params[lay.w1 + i * h..lay.w1 + (i + 1) * h];
            for (a, w) in hidden.iter_mut().zip(row) {
                *a += xi * w;
            }
        }
        hidden.iter_mut().for_each(|a| *a = a.tanh());
        let mask = mask.unwrap_or_else(|| vec![1.0; h]);
        let mut logits = params[lay.b2..lay.len].to_vec();
        for j in 0..h {
            let hj = hidden[j] * mask[j];
            if hj == 0.0 {
                continue;
            }
            let row = &params[lay.w2 + j * v..lay.w2 + (j + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += hj * w;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter_mut().for_each(|l| *l -= lse);
        Forward {
            window,
            x,
            hidden,
            mask,
            logprobs: logits,
        }
    }

    /// Adds `scale · ∂(-log p(target))/∂θ` to `grad`.
    fn backward(&self, params: &[f64], f: &Forward, target: u32, scale: f64, grad: &mut [f64]) {
        let lay = self.layout();
        let (v, e, h) = (self.vocab_size, self.emb_dim, self.hidden);
        let mut dlogits: Vec<f64> = f.logprobs.iter().map(|l| l.exp() * scale).collect();
        dlogits[target as usize] -= scale;

        for (g, d) in grad[lay.b2..lay.len].iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut dh = vec![0.0; h];
        for j in 0..h {
            let hj = f.hidden[j] * f.mask[j];
            let row = lay.w2 + j * v;
            let mut acc = 0.0;
            for k in 0..v {
                grad[row + k] += hj * dlogits[k];
                acc += params[row + k] * dlogits[k];
            }
            dh[j] = acc * f.mask[j] * (1.0 - f.hidden[j] * f.hidden[j]);
        }
        for (g, d) in grad[lay.b1..lay.w2].iter_mut().zip(&dh) {
            *g += d;
        }
        let mut dx = vec![0.0; f.x.len()];
        for (i, &xi) in f.x.iter().enumerate() {
            let row = lay.w1 + i * h;
            let mut acc = 0.0;
            for j in 0..h {
                grad[row + j] += xi * dh[j];
                acc += params[row + j] * dh[j];
            }
            dx[i] = acc;
        }
        for (slot, &t) in f.window.iter().enumerate() {
            let t = t as usize;
            for k in 0..e {
                grad[t * e + k] += dx[slot * e + k];
            }
        }
    }

    /// Mean next-token NLL over the scored positions of `rows` and, when
    /// requested, its gradient. `masks` supplies a dropout mask per position.
    fn loss_and_grad(
        &self,
        params: &[f64],
        batch: &SequenceBatch,
        rows: &[usize],
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
        grad: Option<&mut Vec<f64>>,
    ) -> f64 {
        let count: usize = rows.iter().map(|&r| batch.row_targets(r)).sum();
        let scale = 1.0 / count.max(1) as f64;
        let mut total = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.clear();
            g.resize(params.len(), 0.0);
        }
        for &r in rows {
            let row = &batch.rows[r];
            for t in 1..row.len() {
                if !batch.mask[r][t] {
                    continue;
                }
                let mask = dropout.as_mut().map(|(rng, p)| {
                    let keep = 1.0 / (1.0 - *p);
                    (0..self.hidden)
                        .map(|_| if rng.gen::<f64>() < *p { 0.0 } else { keep })
                        .collect()
                });
                let f = self.forward(params, &row[..t], mask);
                total -= f.logprobs[row[t] as usize];
                if let Some(g) = grad.as_deref_mut() {
                    self.backward(params, &f, row[t], scale, g);
                }
            }
        }
        total * scale
    }

    fn train(&mut self, batch: &SequenceBatch, schedule: &TrainSchedule) -> Result<TrainReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let mut report = TrainReport::default();
        let mut grad = Vec::new();
        let n_rows = batch.rows.len();
        for step in 0..schedule.steps {
            let started = Instant::now();
            let rows: Vec<usize> = schedule.rows_for_step(step, n_rows).collect();
            let dropout = (schedule.dropout > 0.0).then_some((&mut rng, schedule.dropout));
            let params = std::mem::take(&mut self.params);
            let loss = self.loss_and_grad(&params, batch, &rows, dropout, Some(&mut grad));
            self.params = params;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = schedule.lr_at(step);
            for (p, g) in self.params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            if self.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { step });
            }
            report.losses.push(loss);
            report.tokens += rows.iter().map(|&r| batch.mask[r].iter().filter(|&&m| m).count() as u64).sum::<u64>();
            report.step_seconds.push(started.elapsed().as_secs_f64());
        }
        Ok(report)
    }

    /// Analytic gradient of the mean NLL with dropout off.
    pub fn gradient(&self, batch: &SequenceBatch) -> Vec<f64> {
        let rows: Vec<usize> = (0..batch.rows.len()).collect();
        let mut g = Vec::new();
        self.loss_and_grad(&self.params, batch, &rows, None, Some(&mut g));
        g
    }

    pub fn loss(&self, batch: &SequenceBatch) -> f64 {
        let rows: Vec<usize> = (0..batch.rows.len()).collect();
        self.loss_and_grad(&self.params, batch, &rows, None, None)
    }
}

impl LanguageModel for NeuralModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        self.forward(&self.params, context, None).logprobs
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences. The relative error of a parameter is
/// `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn grad_check(model: &NeuralModel, batch: &SequenceBatch, epsilon: f64) -> f64 {
    let analytic = model.gradient(batch);
    let rows: Vec<usize> = (0..batch.rows.len()).collect();
    let mut params = model.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + epsilon;
        let up = model.loss_and_grad(&params, batch, &rows, None, None);
        params[i] = orig - epsilon;
        let down = model.loss_and_grad(&params, batch, &rows, None, None);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}

// ---------------------------------------------------------------------------
// Expert models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "state", rename_all = "snake_case")]
pub enum ExpertModel {
    Ngram(NGramModel),
    Neural(NeuralModel),
}

pub fn new_seed(spec: &ModelSpec, vocab_size: usize, seed: u64) -> Result<ExpertModel> {
    match spec {
        ModelSpec::Ngram { order, lambdas, alpha } => Ok(ExpertModel::Ngram(NGramModel::new(
            vocab_size,
            *order,
            lambdas.clone(),
            *alpha,
        )?)),
        ModelSpec::Neural {
            emb_dim,
            hidden,
            context,
        } => Ok(ExpertModel::Neural(NeuralModel::new(
            vocab_size, *emb_dim, *hidden, *context, seed,
        )?)),
    }
}

/// An independent deep copy.
pub fn branch(model: &ExpertModel) -> ExpertModel {
    model.clone()
}

impl ExpertModel {
    pub fn kind(&self) -> &'static str {
        match self {
            ExpertModel::Ngram(_) => "ngram",
            ExpertModel::Neural(_) => "neural",
        }
    }

    fn inner(&self) -> &dyn LanguageModel {
        match self {
            ExpertModel::Ngram(m) => m,
            ExpertModel::Neural(m) => m,
        }
    }

    /// n-gram: counts every unmasked row prefix once per step it is drawn,
    /// so repeated rows count repeatedly. Neural: SGD with dropout on the
    /// hidden layer and linearly decaying learning rate.
    pub fn train(&mut self, batch: &SequenceBatch, schedule: &TrainSchedule) -> Result<TrainReport> {
        schedule.validate()?;
        if batch.rows.is_empty() || batch.unmasked() == 0 {
            return Err(Error::EmptyInput("training batch has no tokens".into()));
        }
        match self {
            ExpertModel::Neural(m) => m.train(batch, schedule),
            ExpertModel::Ngram(m) => {
                let mut report = TrainReport::default();
                for step in 0..schedule.steps {
                    let started = Instant::now();
                    let mut nll = 0.0;
                    let mut scored = 0usize;
                    for r in schedule.rows_for_step(step, batch.rows.len()) {
                        let len = batch.mask[r].iter().take_while(|&&x| x).count();
                        let row = &batch.rows[r][..len];
                        for t in 1..len {
                            nll -= m.token_logprob(&row[..t], row[t]);
                            scored += 1;
                        }
                        m.count_sequence(row);
                        report.tokens += len as u64;
                    }
                    let loss = nll / scored.max(1) as f64;
                    if !loss.is_finite() {
                        return Err(Error::Divergence { step });
                    }
                    report.losses.push(loss);
                    report.step_seconds.push(started.elapsed().as_secs_f64());
                }
                Ok(report)
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(store::digest_bytes(&self.to_bytes()?))
    }
}

impl LanguageModel for ExpertModel {
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        self.inner().next_token_logprobs(context)
    }

    fn token_logprob(&self, context: &[u32], token: u32) -> f64 {
        self.inner().token_logprob(context, token)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// `exp` of the mean negative log-likelihood over every unmasked position
/// after the first of each row. Log-probabilities are clamped at 0.
///
/// The sum is kept in bits, so a model that gives every token probability
/// `2^-m` scores exactly `2^m`.
pub fn perplexity(model: &dyn LanguageModel, batch: &SequenceBatch) -> Result<f64> {
    let mut bits = 0.0;
    let mut n = 0usize;
    for (row, mask) in batch.rows.iter().zip(&batch.mask) {
        for t in 1..row.len() {
            if mask[t] {
                bits += to_bits(model.token_logprob(&row[..t], row[t]));
                n += 1;
            }
        }
    }
    ppl_from_bits(bits, n)
}

/// Negative log-probability in bits.
pub(crate) fn to_bits(logprob: f64) -> f64 {
    -logprob.min(0.0) / std::f64::consts::LN_2
}

pub(crate) fn ppl_from_bits(bits: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyInput("no scored positions".into()));
    }
    Ok((bits / n as f64).exp2())
}

pub fn perplexity_docs(model: &dyn LanguageModel, docs: &[Document], vocab: &Vocab, seq_len: usize) -> Result<f64> {
    perplexity(model, &pack_documents(docs, vocab, seq_len)?)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCheckpoint {
    version: String,
    pub cluster: Option<usize>,
    pub vocab_digest: String,
    pub schedule: Option<TrainSchedule>,
    pub trained_tokens: u64,
    pub model: ExpertModel,
    /// SHA-256 of the model state.
    pub digest: String,
}

impl ExpertCheckpoint {
    pub fn new(
        model: ExpertModel,
        cluster: Option<usize>,
        vocab_digest: String,
        schedule: Option<TrainSchedule>,
        trained_tokens: u64,
    ) -> Result<Self> {
        let digest = model.digest()?;
        Ok(ExpertCheckpoint {
            version: CHECKPOINT_VERSION.into(),
            cluster,
            vocab_digest,
            schedule,
            trained_tokens,
            model,
            digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn file_digest(path: &Path) -> Result<String> {
        store::digest_file(path)
    }

    /// Loads and re-verifies the model digest.
    pub fn load(path: &Path) -> Result<Self> {
        let ck: ExpertCheckpoint = store::read_versioned(path, CHECKPOINT_VERSION)?;
        let actual = ck.model.digest()?;
        if actual != ck.digest {
            return Err(Error::Integrity(format!(
                "{}: model digest {actual} does not match recorded {}",
                path.display(),
                ck.digest
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Provenance};

    fn ids(s: &str, toks: &[&str]) -> Vec<u32> {
        s.split_whitespace()
            .map(|w| toks.iter().position(|t| t == &w).unwrap() as u32)
            .collect()
    }

    fn row_batch(rows: Vec<Vec<u32>>) -> SequenceBatch {
        let seq_len = rows.iter().map(Vec::len).max().unwrap();
        let mut b = SequenceBatch {
            seq_len,
            rows: Vec::new(),
            mask: Vec::new(),
            doc_of: Vec::new(),
        };
        for r in rows {
            let n = r.len();
            let mut row = r;
            row.resize(seq_len, Vocab::PAD_ID);
            b.mask.push((0..seq_len).map(|i| i < n).collect());
            b.doc_of.push((0..seq_len).map(|i| (i < n).then_some(0)).collect());
            b.rows.push(row);
        }
        b
    }

    #[test]
    fn bigram_interpolation_hand_value() {
        let toks = ["a", "b"];
        let mut m = NGramModel::new(2, 2, Some(vec![0.5, 0.5]), 0.0).unwrap();
        m.count_sequence(&ids("a b a b", &toks));
        assert_eq!(m.token_logprob(&[0], 1), 0.75f64.ln());
        let mut s = NGramModel::new(2, 2, None, DEFAULT_ALPHA).unwrap();
        s.count_sequence(&ids("a b a b", &toks));
        let p1: f64 = (2.0 + 0.01) / (4.0 + 0.02);
        assert!((s.token_logprob(&[0], 1) - (0.5 * p1 + 0.5).ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_context_is_unigram() {
        let mut m = NGramModel::new(4, 3, None, 0.01).unwrap();
        m.count_sequence(&[0, 1, 2, 1, 3, 1]);
        let p = m.next_token_logprobs(&[]);
        for w in 0..4u32 {
            let uni = (m.unigram_count(w) as f64 + 0.01) / (6.0 + 0.04);
            assert!((p[w as usize].exp() - uni).abs() < 1e-15);
        }
    }

    #[test]
    fn fresh_ngram_is_uniform() {
        let m = NGramModel::new(16, 3, None, DEFAULT_ALPHA).unwrap();
        for lp in m.next_token_logprobs(&[3, 4]) {
            assert_eq!(lp, (1.0f64 / 16.0).ln());
        }
    }

    #[test]
    fn recount_hand_counts() {
        let toks = ["a", "b"];
        let mut m = NGramModel::new(2, 2, None, 0.01).unwrap();
        m.count_sequence(&ids("a b a", &toks));
        assert_eq!((m.unigram_count(0), m.unigram_count(1)), (2, 1));
        assert_eq!((m.count(&[0], 1), m.count(&[1], 0), m.count(&[0], 0)), (1, 1, 0));
        assert!(recount_oracle(&m, &ids("a b a", &toks)));
        assert!(!recount_oracle(&m, &ids("a b a b", &toks)));
        let empty = NGramModel::new(2, 2, None, 0.01).unwrap();
        assert!(recount_oracle(&empty, &[]));
    }

    #[test]
    fn chunked_counting_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stream: Vec<u32> = (0..3000).map(|_| rng.gen_range(0..7)).collect();
        let mut m = NGramModel::new(7, 4, None, 0.01).unwrap();
        let mut pos = 0;
        while pos < stream.len() {
            let end = (pos + rng.gen_range(1..50)).min(stream.len());
            m.count_continuation(&stream[..pos], &stream[pos..end]);
            pos = end;
        }
        assert!(recount_oracle(&m, &stream));
    }

    #[test]
    fn bigram_perplexity_by_hand() {
        // train "a b a b a", eval "a b": the only scored target is b after a.
        let toks = ["a", "b"];
        let mut m = NGramModel::new(2, 2, Some(vec![0.5, 0.5]), 0.0).unwrap();
        m.count_sequence(&ids("a b a b a", &toks));
        let ppl = perplexity(&m, &row_batch(vec![ids("a b", &toks)])).unwrap();
        let p = 0.5 * (2.0 / 5.0) + 0.5 * 1.0;
        assert!((ppl - 1.0 / p).abs() < 1e-12);
    }

    struct Oracle;
    impl LanguageModel for Oracle {
        fn vocab_size(&self) -> usize {
            4
        }
        fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
            let next = (context.last().unwrap() + 1) % 4;
            (0..4).map(|w| if w == next { 0.0 } else { f64::NEG_INFINITY }).collect()
        }
    }

    #[test]
    fn oracle_and_uniform_perplexity() {
        let b = row_batch(vec![vec![0, 1, 2, 3, 0, 1]]);
        assert_eq!(perplexity(&Oracle, &b).unwrap(), 1.0);
        let uniform = NGramModel::new(16, 1, None, DEFAULT_ALPHA).unwrap();
        let b = row_batch(vec![(0..16).collect(), (0..9).rev().collect()]);
        assert_eq!(perplexity(&uniform, &b).unwrap(), 16.0);
        assert!(perplexity(&uniform, &row_batch(vec![vec![3]])).is_err());
    }

    #[test]
    fn neural_distributions_normalize() {
        let m = NeuralModel::new(20, 4, 8, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let len = rng.gen_range(0..6);
            let ctx: Vec<u32> = (0..len).map(|_| rng.gen_range(0..20)).collect();
            let p = m.next_token_logprobs(&ctx);
            let s: f64 = p.iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-9);
            assert_eq!(p, m.next_token_logprobs(&ctx));
        }
    }

    #[test]
    fn seeds_are_deterministic() {
        let a = new_seed(&ModelSpec::neural(), 30, 5).unwrap();
        let b = new_seed(&ModelSpec::neural(), 30, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, new_seed(&ModelSpec::neural(), 30, 6).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let row: Vec<u32> = (0..10).map(|_| rng.gen_range(0..12)).collect();
        for seed in [1, 2] {
            let m = NeuralModel::new(12, 4, 8, 3, seed).unwrap();
            let err = grad_check(&m, &row_batch(vec![row.clone()]), 1e-5);
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn no_targets_zero_gradient() {
        let m = NeuralModel::new(12, 4, 8, 3, 1).unwrap();
        let g = m.gradient(&row_batch(vec![vec![5]]));
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn neural_training_reduces_loss_deterministically() {
        let b = row_batch(vec![vec![3, 4, 5, 3, 4, 5, 3, 4, 5, 3]]);
        let schedule = TrainSchedule {
            steps: 200,
            batch_size: 1,
            peak_lr: 0.5,
            dropout: 0.1,
            seed: 3,
        };
        let seed = new_seed(&ModelSpec::neural(), 8, 1).unwrap();
        let mut a = branch(&seed);
        let r = a.train(&b, &schedule).unwrap();
        assert!(r.losses.last().unwrap() < &r.losses[0]);
        let mut c = branch(&seed);
        c.train(&b, &schedule).unwrap();
        assert_eq!(a, c);
        assert_ne!(a.digest().unwrap(), seed.digest().unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let b = row_batch(vec![vec![3, 4, 5, 6, 7, 3, 4]]);
        let mut m = new_seed(&ModelSpec::neural(), 8, 1).unwrap();
        let schedule = TrainSchedule {
            steps: 50,
            batch_size: 1,
            peak_lr: 1e300,
            dropout: 0.0,
            seed: 0,
        };
        assert!(matches!(m.train(&b, &schedule), Err(Error::Divergence { .. })));
    }

    #[test]
    fn branch_is_independent() {
        let corpus = Corpus::new(
            vec![Document::new("a", "x y z x y", None)],
            Provenance::Derived { from: "t".into() },
        )
        .unwrap();
        let vocab = crate::corpus::build_vocab(&corpus, 100).unwrap();
        let batch = crate::corpus::pack_sequences(&corpus, &vocab, 4).unwrap();
        let seed = new_seed(&ModelSpec::ngram(3), vocab.len(), 0).unwrap();
        let before = seed.digest().unwrap();
        let mut b = branch(&seed);
        assert_eq!(b.next_token_logprobs(&[3]), seed.next_token_logprobs(&[3]));
        b.train(&batch, &TrainSchedule::default()).unwrap();
        assert_eq!(seed.digest().unwrap(), before);
        assert_ne!(b.digest().unwrap(), before);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = row_batch(vec![vec![3, 4, 5, 3, 4, 6, 7]]);
        for spec in [ModelSpec::ngram(3), ModelSpec::neural()] {
            let mut m = new_seed(&spec, 9, 2).unwrap();
            m.train(&b, &TrainSchedule { steps: 5, ..Default::default() }).unwrap();
            let ck = ExpertCheckpoint::new(m.clone(), Some(1), "v".into(), None, 7).unwrap();
            let p = dir.path().join(format!("{}.ckpt", m.kind()));
            ck.save(&p).unwrap();
            let back = ExpertCheckpoint::load(&p).unwrap();
            assert_eq!(back, ck);
            for ctx in [&[][..], &[3], &[4, 5], &[7, 7, 7]] {
                assert_eq!(back.model.next_token_logprobs(ctx), m.next_token_logprobs(ctx));
            }
            let mut forged = ck.clone();
            forged.digest = "0".repeat(64);
            forged.save(&p).unwrap();
            assert!(matches!(ExpertCheckpoint::load(&p), Err(Error::Integrity(_))));
            ck.save(&p).unwrap();
            let bytes = std::fs::read(&p).unwrap();
            std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
            assert!(matches!(ExpertCheckpoint::load(&p), Err(Error::CorruptFile { .. })));
        }
    }
}
