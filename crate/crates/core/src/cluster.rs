//! Balanced k-means.
//!
//! The E-step of balanced k-means is a linear assignment problem: documents
//! are bidders, and every cluster offers `floor(D/K)` identical slots (plus
//! one optional slot each when `K` does not divide `D`). It is solved with a
//! forward Gauss-Seidel auction under ε-scaling. Costs are quantized to
//! integers first, and the last auction phase runs with `ε < 1/(n+1)`, so the
//! result is exactly optimal for the quantized problem.
//!
//! Prediction for new documents is greedy (nearest center); balancing is
//! only used while estimating the centers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;

const CLUSTERS_VERSION: &str = "cbtm-clusters/1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Plain Euclidean distance, as in the balanced objective.
    #[default]
    Euclidean,
    /// Squared Euclidean distance; makes the mean update an exact minimizer.
    Squared,
}

impl DistanceMode {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq = squared_distance(a, b);
        match self {
            DistanceMode::Euclidean => sq.sqrt(),
            DistanceMode::Squared => sq,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub clusters: Vec<usize>,
    pub k: usize,
    /// Total distance of documents to their centers, when centers exist.
    pub cost: Option<f64>,
}

impl Assignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.clusters {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.clusters
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionConfig {
    /// First ε, in distance units. Halved each phase until below 1/(n+1)
    /// in quantized units.
    pub initial_epsilon: f64,
    /// Costs are quantized to multiples of `max_cost / 2^bits`.
    pub quantization_bits: u32,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        AuctionConfig {
            initial_epsilon: 1.0,
            quantization_bits: 32,
        }
    }
}

fn check_points(name: &str, points: &[Vec<f64>], dim: Option<usize>) -> Result<usize> {
    let d = dim.or_else(|| points.first().map(Vec::len)).unwrap_or(0);
    for p in points {
        if p.len() != d {
            return Err(Error::InvalidConfig(format!(
                "{name}: mixed dimensions {} and {d}",
                p.len()
            )));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct Price(f64);

impl Eq for Price {}

impl Ord for Price {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Solves `min Σ cost[i][a_i]` subject to every cluster receiving
/// `floor(D/K)` or `ceil(D/K)` rows. Returns the cluster of every row.
pub fn auction_balanced(cost: &[Vec<f64>], k: usize, cfg: &AuctionConfig) -> Vec<usize> {
    let d = cost.len();
    let base = d / k;
    let rem = d % k;

    let max_cost = cost.iter().flatten().fold(0.0f64, |m, &c| m.max(c.abs()));
    let quantum = if max_cost > 0.0 {
        max_cost / 2f64.powi(cfg.quantization_bits as i32)
    } else {
        1.0
    };
    let benefit: Vec<Vec<f64>> = cost
        .iter()
        .map(|row| row.iter().map(|c| -(c / quantum).round()).collect())
        .collect();

    // Slots: `base` regular ones per cluster, then one optional slot per
    // cluster when K does not divide D. The K - rem dummy bidders may only
    // take optional slots, leaving exactly `rem` of them for documents.
    let mut slot_cluster = Vec::with_capacity(d + k);
    for c in 0..k {
        slot_cluster.extend(std::iter::repeat(c).take(base));
    }
    let mut optional_slot = vec![usize::MAX; k];
    let n_dummies = if rem > 0 { k - rem } else { 0 };
    if rem > 0 {
        for (c, opt) in optional_slot.iter_mut().enumerate() {
            *opt = slot_cluster.len();
            slot_cluster.push(c);
        }
    }
    let n = d + n_dummies;
    debug_assert_eq!(slot_cluster.len(), n);

    let mut price = vec![0.0f64; n];
    let mut by_cluster: Vec<BTreeSet<(Price, usize)>> = vec![BTreeSet::new(); k];
    for (s, &c) in slot_cluster.iter().enumerate() {
        by_cluster[c].insert((Price(0.0), s));
    }

    let threshold = 1.0 / (n as f64 + 1.0);
    let mut eps = (cfg.initial_epsilon / quantum).max(threshold / 2.0);
    const NONE: usize = usize::MAX;
    let mut assigned = vec![NONE; n];

    loop {
        let mut owner = vec![NONE; n];
        assigned.iter_mut().for_each(|a| *a = NONE);
        let mut queue: VecDeque<usize> = (0..n).collect();

        while let Some(b) = queue.pop_front() {
            let mut best = (f64::NEG_INFINITY, NONE);
            let mut second = f64::NEG_INFINITY;
            let mut offer = |value: f64, slot: usize| {
                if value > best.0 {
                    second = best.0;
                    best = (value, slot);
                } else if value > second {
                    second = value;
                }
            };
            if b < d {
                for (c, set) in by_cluster.iter().enumerate() {
                    let mut it = set.iter();
                    if let Some(&(p1, s1)) = it.next() {
                        offer(benefit[b][c] - p1.0, s1);
                        if let Some(&(p2, s2)) = it.next() {
                            offer(benefit[b][c] - p2.0, s2);
                        }
                    }
                }
            } else {
                for &s in &optional_slot {
                    offer(-price[s], s);
                }
            }
            let (v1, slot) = best;
            let increment = if second.is_finite() {
                v1 - second + eps
            } else {
                eps
            };
            let c = slot_cluster[slot];
            by_cluster[c].remove(&(Price(price[slot]), slot));
            price[slot] += increment;
            by_cluster[c].insert((Price(price[slot]), slot));

            let prev = owner[slot];
            if prev != NONE {
                assigned[prev] = NONE;
                queue.push_back(prev);
            }
            owner[slot] = b;
            assigned[b] = slot;
        }

        if eps < threshold {
            break;
        }
        eps /= 2.0;
    }

    assigned[..d].iter().map(|&s| slot_cluster[s]).collect()
}

fn cost_matrix(points: &[Vec<f64>], centers: &[Vec<f64>], mode: DistanceMode) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| centers.iter().map(|c| mode.eval(p, c)).collect())
        .collect()
}

/// Balanced E-step: minimum total distance with cluster sizes
/// `floor(D/K)` or `ceil(D/K)`.
pub fn balanced_assign(
    embeddings: &[Vec<f64>],
    centers: &[Vec<f64>],
    mode: DistanceMode,
    cfg: &AuctionConfig,
) -> Result<Assignment> {
    let k = centers.len();
    if k == 0 || embeddings.len() < k {
        return Err(Error::InvalidConfig(format!(
            "balanced assignment needs D >= K >= 1 (D = {}, K = {k})",
            embeddings.len()
        )));
    }
    let dim = check_points("centers", centers, None)?;
    check_points("embeddings", embeddings, Some(dim))?;
    let cost = cost_matrix(embeddings, centers, mode);
    let clusters = auction_balanced(&cost, k, cfg);
    let total = clusters.iter().zip(&cost).map(|(&c, row)| row[c]).sum();
    Ok(Assignment {
        clusters,
        k,
        cost: Some(total),
    })
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn greedy_assign(
    embeddings: &[Vec<f64>],
    centers: &[Vec<f64>],
    mode: DistanceMode,
) -> Result<Assignment> {
    if centers.is_empty() {
        return Err(Error::InvalidConfig("no centers".into()));
    }
    let dim = check_points("centers", centers, None)?;
    check_points("embeddings", embeddings, Some(dim))?;
    let mut total = 0.0;
    let clusters = embeddings
        .iter()
        .map(|p| {
            let (c, _) = nearest_center(p, centers);
            total += mode.eval(p, &centers[c]);
            c
        })
        .collect();
    Ok(Assignment {
        clusters,
        k: centers.len(),
        cost: Some(total),
    })
}

pub fn random_assign(n_docs: usize, k: usize, seed: u64) -> Result<Assignment> {
    if n_docs == 0 || k == 0 {
        return Err(Error::InvalidConfig(
            "random assignment needs at least one document and one cluster".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Assignment {
        clusters: (0..n_docs).map(|_| rng.gen_range(0..k)).collect(),
        k,
        cost: None,
    })
}

/// Mean embedding per cluster; empty clusters fall back to the global mean.
pub fn cluster_means(embeddings: &[Vec<f64>], assignment: &Assignment) -> Vec<Vec<f64>> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; assignment.k];
    let mut counts = vec![0usize; assignment.k];
    for (p, &c) in embeddings.iter().zip(&assignment.clusters) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p) {
            *s += x;
        }
    }
    let global = mean_of(embeddings);
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            if n == 0 {
                global.clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

fn mean_of(points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points.first().map_or(0, Vec::len);
    let mut m = vec![0.0; dim];
    for p in points {
        for (s, x) in m.iter_mut().zip(p) {
            *s += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= points.len().max(1) as f64);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    Balanced,
    Unbalanced,
    Random,
}

impl std::str::FromStr for ClusterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(ClusterMode::Balanced),
            "unbalanced" => Ok(ClusterMode::Unbalanced),
            "random" => Ok(ClusterMode::Random),
            other => Err(Error::InvalidConfig(format!("unknown cluster mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    #[serde(default)]
    pub distance: DistanceMode,
    #[serde(default)]
    pub auction: AuctionConfig,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            distance: DistanceMode::Euclidean,
            auction: AuctionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub mode: ClusterMode,
    pub iterations: usize,
    pub final_shift: f64,
    pub seed: u64,
    pub distance: DistanceMode,
    /// Objective after every E-step, the final one included.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    version: String,
    pub k: usize,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub meta: FitMeta,
}

impl ClusterModel {
    pub fn from_centers(centers: Vec<Vec<f64>>, meta: FitMeta) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidConfig("cluster model needs K >= 1".into()));
        }
        let dim = check_points("centers", &centers, None)?;
        Ok(ClusterModel {
            version: CLUSTERS_VERSION.into(),
            k: centers.len(),
            dim,
            centers,
            meta,
        })
    }

    pub fn predict(&self, embeddings: &[Vec<f64>]) -> Result<Assignment> {
        greedy_assign(embeddings, &self.centers, self.meta.distance)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        store::to_json_bytes(self)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(store::digest_bytes(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ClusterModel = store::read_versioned(path, CLUSTERS_VERSION)?;
        if m.centers.len() != m.k || m.centers.iter().any(|c| c.len() != m.dim) {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                message: "center matrix does not match K x d".into(),
            });
        }
        Ok(m)
    }
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance from the nearest chosen center.
fn init_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (w, p) in nearest.iter_mut().zip(points) {
            *w = w.min(squared_distance(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves the point farthest from its center into every empty cluster.
fn repair_empty(points: &[Vec<f64>], centers: &mut [Vec<f64>], assignment: &mut Assignment) {
    loop {
        let sizes = assignment.sizes();
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let c = assignment.clusters[i];
            if sizes[c] < 2 {
                continue;
            }
            let d = squared_distance(p, &centers[c]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        assignment.clusters[i] = empty;
        centers[empty] = points[i].clone();
    }
}

fn fit_kmeans(
    embeddings: &[Vec<f64>],
    k: usize,
    cfg: &KMeansConfig,
    mode: ClusterMode,
) -> Result<(ClusterModel, Assignment)> {
    if k == 0 || k > embeddings.len() {
        return Err(Error::InvalidConfig(format!(
            "K = {k} must satisfy 1 <= K <= D = {}",
            embeddings.len()
        )));
    }
    check_points("embeddings", embeddings, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = init_centers(embeddings, k, &mut rng);
    let e_step = |centers: &[Vec<f64>]| -> Result<Assignment> {
        match mode {
            ClusterMode::Balanced => balanced_assign(embeddings, centers, cfg.distance, &cfg.auction),
            _ => greedy_assign(embeddings, centers, cfg.distance),
        }
    };

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut shift = f64::INFINITY;
    while iterations < cfg.max_iter {
        let mut assignment = e_step(&centers)?;
        if mode == ClusterMode::Unbalanced {
            repair_empty(embeddings, &mut centers, &mut assignment);
        }
        history.push(assignment_cost(embeddings, &centers, &assignment, cfg.distance));
        let updated = cluster_means(embeddings, &assignment);
        shift = centers
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = updated;
        iterations += 1;
        if shift < cfg.tol {
            break;
        }
    }
    let mut assignment = e_step(&centers)?;
    if mode == ClusterMode::Unbalanced {
        repair_empty(embeddings, &mut centers, &mut assignment);
    }
    let final_cost = assignment_cost(embeddings, &centers, &assignment, cfg.distance);
    history.push(final_cost);
    assignment.cost = Some(final_cost);

    let model = ClusterModel::from_centers(
        centers,
        FitMeta {
            mode,
            iterations,
            final_shift: shift,
            seed: cfg.seed,
            distance: cfg.distance,
            objective_history: history,
        },
    )?;
    Ok((model, assignment))
}

fn assignment_cost(
    points: &[Vec<f64>],
    centers: &[Vec<f64>],
    assignment: &Assignment,
    mode: DistanceMode,
) -> f64 {
    points
        .iter()
        .zip(&assignment.clusters)
        .map(|(p, &c)| mode.eval(p, &centers[c]))
        .sum()
}

/// Hard-EM k-means whose E-step is the balanced assignment.
pub fn fit_balanced_kmeans(
    embeddings: &[Vec<f64>],
    k: usize,
    cfg: &KMeansConfig,
) -> Result<(ClusterModel, Assignment)> {
    fit_kmeans(embeddings, k, cfg, ClusterMode::Balanced)
}

/// Plain k-means (greedy E-step) with farthest-point repair of empty clusters.
pub fn fit_unbalanced_kmeans(
    embeddings: &[Vec<f64>],
    k: usize,
    cfg: &KMeansConfig,
) -> Result<(ClusterModel, Assignment)> {
    fit_kmeans(embeddings, k, cfg, ClusterMode::Unbalanced)
}

/// Random partition, with centers set to the mean embedding of each part.
pub fn fit_random(
    embeddings: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<(ClusterModel, Assignment)> {
    check_points("embeddings", embeddings, None)?;
    let assignment = random_assign(embeddings.len(), k, seed)?;
    let centers = cluster_means(embeddings, &assignment);
    let model = ClusterModel::from_centers(
        centers,
        FitMeta {
            mode: ClusterMode::Random,
            iterations: 0,
            final_shift: 0.0,
            seed,
            distance: DistanceMode::Euclidean,
            objective_history: Vec::new(),
        },
    )?;
    Ok((model, assignment))
}

// ---------------------------------------------------------------------------
// Analyses
// ---------------------------------------------------------------------------

/// Percent of each label's documents that fall in each cluster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapMatrix {
    pub labels: Vec<String>,
    pub k: usize,
    pub percent: Vec<Vec<f64>>,
}

pub fn overlap_matrix(assignment: &Assignment, labels: &[Option<&str>]) -> Result<OverlapMatrix> {
    if labels.len() != assignment.clusters.len() {
        return Err(Error::InvalidConfig(
            "labels and assignment have different lengths".into(),
        ));
    }
    let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (&c, label)) in assignment.clusters.iter().zip(labels).enumerate() {
        let label = label.ok_or_else(|| Error::MissingLabel(format!("#{i}")))?;
        counts.entry(label).or_insert_with(|| vec![0; assignment.k])[c] += 1;
    }
    let (labels, percent) = counts
        .into_iter()
        .map(|(l, row)| {
            let total: usize = row.iter().sum();
            let pct = row
                .iter()
                .map(|&n| 100.0 * n as f64 / total as f64)
                .collect();
            (l.to_string(), pct)
        })
        .unzip();
    Ok(OverlapMatrix {
        labels,
        k: assignment.k,
        percent,
    })
}

impl OverlapMatrix {
    /// One-to-one label→cluster matching that maximizes total overlap.
    /// Requires as many labels as clusters.
    pub fn best_matching(&self) -> Result<Vec<usize>> {
        if self.labels.len() != self.k {
            return Err(Error::InvalidConfig(format!(
                "matching needs {} labels for {} clusters",
                self.labels.len(),
                self.k
            )));
        }
        let cost: Vec<Vec<f64>> = self
            .percent
            .iter()
            .map(|row| row.iter().map(|p| 100.0 - p).collect())
            .collect();
        Ok(auction_balanced(&cost, self.k, &AuctionConfig::default()))
    }

    /// Overlap of each label with its matched cluster.
    pub fn matched_diagonal(&self) -> Result<Vec<f64>> {
        let m = self.best_matching()?;
        Ok(m.iter()
            .enumerate()
            .map(|(row, &c)| self.percent[row][c])
            .collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.k).map(|c| format!("cluster_{c}")));
        w.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.percent) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeStats {
    pub sizes: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub median: f64,
    pub range: usize,
}

pub fn cluster_size_stats(assignment: &Assignment) -> Result<SizeStats> {
    if assignment.clusters.is_empty() || assignment.k == 0 {
        return Err(Error::EmptyInput("assignment is empty".into()));
    }
    let sizes = assignment.sizes();
    Ok(size_stats(sizes))
}

pub fn size_stats(sizes: Vec<usize>) -> SizeStats {
    let mut sorted = sizes.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let (min, max) = (sorted[0], sorted[n - 1]);
    SizeStats {
        sizes,
        min,
        max,
        median,
        range: max - min,
    }
}

pub fn write_assignment_csv(path: &Path, doc_ids: &[&str], assignment: &Assignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["doc_id", "cluster"])?;
    for (id, c) in doc_ids.iter().zip(&assignment.clusters) {
        w.write_record([id.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
