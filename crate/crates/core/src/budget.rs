//! Training cost accounting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one expert's training run. `tokens` is the total token budget
/// shared by all `k` experts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopSpec {
    pub layers: u64,
    pub hidden: u64,
    pub seq_len: u64,
    pub vocab: u64,
    pub tokens: u64,
    pub k: u64,
}

impl FlopSpec {
    fn validate(&self) -> Result<()> {
        let f = [self.layers, self.hidden, self.seq_len, self.vocab, self.tokens, self.k];
        if f.contains(&0) {
            return Err(Error::InvalidConfig(format!("all FLOP spec fields must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `96·l·h²·T/k · (1 + s/(6h) + V/(16·l·h))`.
///
/// The expression is expanded to `T·(96·l·h² + 16·l·h·s + 6·h·V) / k`,
/// whose numerator is an exact integer, so the result is rounded once.
pub fn elm_flops(spec: &FlopSpec) -> Result<f64> {
    Ok(dense_numerator(spec)? as f64 / spec.k as f64)
}

/// [`elm_flops`] as the exact fraction `(numerator, k)`.
pub fn elm_flops_ratio(spec: &FlopSpec) -> Result<(u128, u64)> {
    Ok((dense_numerator(spec)?, spec.k))
}

fn dense_numerator(spec: &FlopSpec) -> Result<u128> {
    spec.validate()?;
    let (l, h, s, v, t) = (
        spec.layers as u128,
        spec.hidden as u128,
        spec.seq_len as u128,
        spec.vocab as u128,
        spec.tokens as u128,
    );
    (96 * l * h * h + 16 * l * h * s + 6 * h * v)
        .checked_mul(t)
        .ok_or_else(|| Error::InvalidConfig(format!("FLOP count overflows: {spec:?}")))
}

/// Cost of training all `k` experts; equal to the dense cost for any `k`.
pub fn total_flops(spec: &FlopSpec) -> Result<f64> {
    Ok(dense_numerator(spec)? as f64)
}

/// A (performance, cost) observation, e.g. (perplexity, FLOPs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub t: f64,
    pub cost: f64,
}

fn sorted_observations(obs: &[CostPoint]) -> Result<Vec<CostPoint>> {
    if obs.len() < 2 {
        return Err(Error::InvalidConfig("interpolation needs at least two observations".into()));
    }
    if obs.iter().any(|o| !(o.cost > 0.0) || !o.t.is_finite() || !o.cost.is_finite()) {
        return Err(Error::InvalidConfig("observation costs must be positive and finite".into()));
    }
    let mut v = obs.to_vec();
    v.sort_by(|a, b| a.t.total_cmp(&b.t));
    if v.windows(2).any(|w| w[0].t == w[1].t) {
        return Err(Error::InvalidConfig("observation t values must be distinct".into()));
    }
    Ok(v)
}

/// Log-linear interpolation between the two observations bracketing `t`.
/// Targets outside the observed range are refused.
pub fn interpolate_cost(obs: &[CostPoint], t: f64) -> Result<f64> {
    let v = sorted_observations(obs)?;
    let (lo, hi) = (v[0].t, v[v.len() - 1].t);
    if !(t >= lo && t <= hi) {
        return Err(Error::Extrapolation { target: t, lo, hi });
    }
    if let Some(p) = v.iter().find(|p| p.t == t) {
        return Ok(p.cost);
    }
    let i = v.partition_point(|p| p.t < t);
    let (a, b) = (v[i - 1], v[i]);
    let r = (t - a.t) / (b.t - a.t);
    Ok((a.cost.ln() + r * (b.cost.ln() - a.cost.ln())).exp())
}

/// `c_dense(t) / c_cbtm(t)`.
pub fn speedup(dense: &[CostPoint], cbtm: &[CostPoint], t: f64) -> Result<f64> {
    Ok(interpolate_cost(dense, t)? / interpolate_cost(cbtm, t)?)
}

/// Adds a fixed cost, such as the FLOPs spent pretraining a shared seed, to
/// every observation. Apply it to both curves before calling [`speedup`].
pub fn with_offset(obs: &[CostPoint], offset: f64) -> Result<Vec<CostPoint>> {
    if !(offset >= 0.0) || !offset.is_finite() {
        return Err(Error::InvalidConfig(format!("cost offset {offset} must be finite and >= 0")));
    }
    Ok(obs.iter().map(|o| CostPoint { t: o.t, cost: o.cost + offset }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTiming {
    pub configuration: String,
    pub workers: usize,
    /// Max seconds-per-update of each expert.
    pub expert_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRow {
    pub configuration: String,
    pub workers: usize,
    pub max_seconds_per_update: f64,
    /// Measured time plus a modeled per-update communication penalty.
    pub with_penalty: f64,
}

pub fn update_report(timings: &[UpdateTiming], penalty: f64) -> Result<Vec<UpdateRow>> {
    if !(penalty >= 0.0) {
        return Err(Error::InvalidConfig("communication penalty must be >= 0".into()));
    }
    timings
        .iter()
        .map(|t| {
            if t.expert_max.is_empty() {
                return Err(Error::EmptyInput(format!("{}: no timing records", t.configuration)));
            }
            let m = t.expert_max.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(UpdateRow {
                configuration: t.configuration.clone(),
                workers: t.workers,
                max_seconds_per_update: m,
                with_penalty: m + penalty,
            })
        })
        .collect()
}

pub fn write_update_csv(path: &Path, rows: &[UpdateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["configuration", "workers", "max_seconds_per_update", "with_penalty"])?;
    for r in rows {
        w.write_record([
            r.configuration.clone(),
            r.workers.to_string(),
            r.max_seconds_per_update.to_string(),
            r.with_penalty.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
