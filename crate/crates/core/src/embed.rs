//! Document embeddings: tf-idf with stop-word removal and number masking,
//! exact truncated SVD, and per-dimension standardization.
//!
//! The pipeline is fit once, on a single shard of the training corpus. Its
//! inverse transform maps points in embedding space (cluster centers) back to
//! weighted vocabulary terms.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Document};
use crate::error::{Error, Result};
use crate::store;

pub const NUMBER_MASK: &str = "<num>";
pub const DEFAULT_DIM: usize = 100;
const SCALE_FLOOR: f64 = 1e-8;
const PIPELINE_VERSION: &str = "cbtm-embed/1";

/// Fixed English stop-word lexicon.
pub const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "cannot", "could", "did", "do", "does", "doing", "down", "during", "each",
    "either", "else", "etc", "ever", "every", "few", "for", "from", "further", "had", "has",
    "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how", "i",
    "if", "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "much", "must",
    "my", "myself", "neither", "no", "nor", "not", "now", "of", "off", "often", "on", "once",
    "only", "or", "other", "ought", "our", "ours", "ourselves", "out", "over", "own", "per",
    "rather", "same", "she", "should", "since", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "themselves", "then", "there", "therefore", "these", "they",
    "this", "those", "though", "through", "thus", "to", "too", "under", "until", "up", "upon",
    "us", "very", "via", "was", "we", "were", "what", "whatever", "when", "where", "whether",
    "which", "while", "who", "whom", "whose", "why", "will", "with", "within", "without", "would",
    "yet", "you", "your", "yours", "yourself", "yourselves",
];

/// Digits with optional punctuation, e.g. `911`, `3.14`, `1,000`, `(555)`.
pub fn is_number_token(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
        && token
            .chars()
            .all(|c| c.is_ascii_digit() || c.is_ascii_punctuation())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TfidfConfig {
    /// Replaces the bundled English list when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopwords: Option<Vec<String>>,
}

impl TfidfConfig {
    pub fn with_stopword_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(TfidfConfig {
            stopwords: Some(raw.split_whitespace().map(str::to_lowercase).collect()),
        })
    }
}

/// A sparse row: strictly increasing feature indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfModel {
    features: Vec<String>,
    idf: Vec<f64>,
    stopwords: Vec<String>,
    mask_token: String,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    stopword_set: HashSet<String>,
}

impl TfidfModel {
    fn rebuild_indices(&mut self) {
        self.index = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        self.stopword_set = self.stopwords.iter().cloned().collect();
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn is_stopword(&self, term: &str) -> bool {
        self.stopword_set.contains(term)
    }

    /// Lower-cases, masks numbers and strips surrounding punctuation; `None`
    /// when nothing is left or the term is a stop word.
    pub fn normalize_token(&self, raw: &str) -> Option<String> {
        normalize_token(raw, &self.stopword_set, &self.mask_token)
    }

    /// Feature index of a raw whitespace token, if it survives normalization
    /// and was seen at fit time.
    pub fn feature_of(&self, raw: &str) -> Option<usize> {
        self.normalize_token(raw)
            .and_then(|t| self.feature_index(&t))
    }

    /// Raw term counts of `text` over fitted features; unseen terms ignored.
    pub fn counts(&self, text: &str) -> BTreeMap<usize, f64> {
        let mut counts = BTreeMap::new();
        for tok in tokenize(text) {
            if let Some(f) = self.feature_of(tok) {
                *counts.entry(f).or_insert(0.0) += 1.0;
            }
        }
        counts
    }

    /// tf·idf weights of the given counts, L2-normalized (zero stays zero).
    pub fn weigh_counts(&self, counts: &BTreeMap<usize, f64>) -> SparseVec {
        let mut v = SparseVec {
            indices: Vec::with_capacity(counts.len()),
            values: Vec::with_capacity(counts.len()),
        };
        for (&f, &c) in counts {
            if c > 0.0 {
                v.indices.push(f);
                v.values.push(c * self.idf[f]);
            }
        }
        let norm = v.norm();
        if norm > 0.0 {
            v.values.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn transform(&self, text: &str) -> SparseVec {
        self.weigh_counts(&self.counts(text))
    }
}

fn normalize_token(raw: &str, stopwords: &HashSet<String>, mask: &str) -> Option<String> {
    let lower = raw.to_lowercase();
    if is_number_token(&lower) {
        return Some(mask.to_string());
    }
    let trimmed = lower.trim_matches(|c: char| c.is_ascii_punctuation());
    if trimmed.is_empty() || stopwords.contains(trimmed) {
        return None;
    }
    Some(trimmed.to_string())
}

/// Smooth idf, `ln((1 + N) / (1 + df)) + 1`, over lexicographically ordered
/// features.
pub fn fit_tfidf(docs: &[Document], config: &TfidfConfig) -> Result<TfidfModel> {
    if docs.len() < 2 {
        return Err(Error::EmptyInput(
            "tf-idf needs at least two documents".into(),
        ));
    }
    let mut stopwords: Vec<String> = match &config.stopwords {
        Some(list) => list.clone(),
        None => ENGLISH_STOPWORDS.iter().map(|s| s.to_string()).collect(),
    };
    stopwords.sort();
    stopwords.dedup();
    let stop_set: HashSet<String> = stopwords.iter().cloned().collect();

    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        let terms: HashSet<String> = doc
            .tokens()
            .filter_map(|t| normalize_token(t, &stop_set, NUMBER_MASK))
            .collect();
        for t in terms {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::EmptyInput(
            "every document is empty after stop-word and number filtering".into(),
        ));
    }
    let n = docs.len() as f64;
    let (features, idf): (Vec<String>, Vec<f64>) = df
        .into_iter()
        .map(|(t, d)| {
            let w = ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0;
            (t, w)
        })
        .unzip();
    let mut model = TfidfModel {
        features,
        idf,
        stopwords,
        mask_token: NUMBER_MASK.to_string(),
        index: HashMap::new(),
        stopword_set: HashSet::new(),
    };
    model.rebuild_indices();
    Ok(model)
}

/// Rank-`d` linear map into embedding space plus standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    /// d rows, one right singular direction each, over the feature space.
    pub components: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectorFit {
    pub projector: Projector,
    /// Set when the requested dimension exceeded the matrix rank.
    pub clamped_from: Option<usize>,
}

impl Projector {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    /// Coordinates along each component, before standardization.
    pub fn project(&self, v: &SparseVec) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| v.iter().map(|(i, x)| c[i] * x).sum())
            .collect()
    }

    pub fn standardize(&self, mut z: Vec<f64>) -> Vec<f64> {
        for ((x, m), s) in z.iter_mut().zip(&self.mean).zip(&self.scale) {
            *x = (*x - m) / s;
        }
        z
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    /// Maps an unstandardized embedding back to feature space.
    pub fn back_project(&self, z: &[f64]) -> Vec<f64> {
        let f = self.components.first().map_or(0, Vec::len);
        let mut out = vec![0.0; f];
        for (row, &x) in self.components.iter().zip(z) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += x * c;
            }
        }
        out
    }
}

fn eigen_desc(gram: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let n = gram.nrows();
    let eig = SymmetricEigen::new(gram);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Exact truncated SVD via the eigendecomposition of the smaller Gram matrix,
/// followed by standardization statistics over the projected fit sample.
pub fn fit_projector(vectors: &[SparseVec], n_features: usize, d: usize) -> Result<ProjectorFit> {
    let n = vectors.len();
    if d == 0 || n < d {
        return Err(Error::InvalidConfig(format!(
            "projector dimension {d} must satisfy 1 <= d <= sample count {n}"
        )));
    }
    if vectors.iter().flat_map(|v| &v.values).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projector fit sample".into()));
    }

    let (pairs, feature_side) = if n_features <= n {
        let mut g = DMatrix::<f64>::zeros(n_features, n_features);
        for v in vectors {
            for (i, x) in v.iter() {
                for (j, y) in v.iter() {
                    g[(i, j)] += x * y;
                }
            }
        }
        (eigen_desc(g), true)
    } else {
        let mut g = DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let s = vectors[a].dot(&vectors[b]);
                g[(a, b)] = s;
                g[(b, a)] = s;
            }
        }
        (eigen_desc(g), false)
    };

    let top = pairs.first().map_or(0.0, |p| p.0.max(0.0));
    let tol = top * (n.max(n_features) as f64) * f64::EPSILON * 16.0;
    let rank = pairs.iter().filter(|p| p.0 > tol && p.0 > 0.0).count();
    if rank == 0 {
        return Err(Error::EmptyInput("projector fit sample is all zeros".into()));
    }
    let dim = d.min(rank);
    let clamped_from = (dim < d).then_some(d);
    if let Some(req) = clamped_from {
        log::warn!("requested {req} dimensions but the fit matrix has rank {rank}; using {dim}");
    }

    let mut components = Vec::with_capacity(dim);
    let mut singular_values = Vec::with_capacity(dim);
    for (lambda, vec) in pairs.into_iter().take(dim) {
        let sigma = lambda.sqrt();
        let mut comp = if feature_side {
            vec
        } else {
            // v = X^T u / sigma
            let mut v = vec![0.0; n_features];
            for (row, u) in vectors.iter().zip(&vec) {
                for (i, x) in row.iter() {
                    v[i] += x * u;
                }
            }
            v.iter_mut().for_each(|x| *x /= sigma);
            v
        };
        fix_sign(&mut comp);
        components.push(comp);
        singular_values.push(sigma);
    }

    let mut projector = Projector {
        components,
        singular_values,
        mean: vec![0.0; dim],
        scale: vec![1.0; dim],
    };
    let projected: Vec<Vec<f64>> = vectors.iter().map(|v| projector.project(v)).collect();
    let nf = n as f64;
    for k in 0..dim {
        let mean = projected.iter().map(|z| z[k]).sum::<f64>() / nf;
        let var = projected.iter().map(|z| (z[k] - mean).powi(2)).sum::<f64>() / nf;
        projector.mean[k] = mean;
        projector.scale[k] = var.sqrt().max(SCALE_FLOOR);
    }
    Ok(ProjectorFit {
        projector,
        clamped_from,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub dim: usize,
    #[serde(default)]
    pub tfidf: TfidfConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            dim: DEFAULT_DIM,
            tfidf: TfidfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub shard: String,
    pub seed: u64,
    pub documents: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedPipeline {
    version: String,
    pub tfidf: TfidfModel,
    pub projector: Projector,
    pub provenance: FitProvenance,
}

impl EmbedPipeline {
    /// Fits tf-idf and the projector on `shard`. The requested dimension is
    /// clamped to the rank of the shard's tf-idf matrix.
    pub fn fit(shard: &[Document], config: &EmbedConfig, provenance: FitProvenance) -> Result<Self> {
        let tfidf = fit_tfidf(shard, &config.tfidf)?;
        let rows: Vec<SparseVec> = shard.iter().map(|d| tfidf.transform(&d.text)).collect();
        let dim = config.dim.min(rows.len());
        let fit = fit_projector(&rows, tfidf.feature_count(), dim)?;
        Ok(EmbedPipeline {
            version: PIPELINE_VERSION.into(),
            tfidf,
            projector: fit.projector,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.projector.dim()
    }

    pub fn embed_sparse(&self, v: &SparseVec) -> Vec<f64> {
        self.projector.standardize(self.projector.project(v))
    }

    pub fn embed_document(&self, text: &str) -> Vec<f64> {
        self.embed_sparse(&self.tfidf.transform(text))
    }

    pub fn embed_counts(&self, counts: &BTreeMap<usize, f64>) -> Vec<f64> {
        self.embed_sparse(&self.tfidf.weigh_counts(counts))
    }

    pub fn embed_all(&self, docs: &[Document]) -> Vec<Vec<f64>> {
        docs.iter().map(|d| self.embed_document(&d.text)).collect()
    }

    /// Features with the largest weight after mapping `center` back to
    /// feature space; descending, ties lexicographic.
    pub fn top_terms(&self, center: &[f64], m: usize) -> Result<Vec<(String, f64)>> {
        if center.len() != self.dim() {
            return Err(Error::InvalidConfig(format!(
                "center has dimension {}, pipeline has {}",
                center.len(),
                self.dim()
            )));
        }
        let weights = self
            .projector
            .back_project(&self.projector.unstandardize(center));
        let mut ranked: Vec<(usize, f64)> = weights.into_iter().enumerate().collect();
        let features = self.tfidf.features();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| features[a.0].cmp(&features[b.0]))
        });
        Ok(ranked
            .into_iter()
            .take(m)
            .map(|(i, w)| (features[i].clone(), w))
            .collect())
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
        let mut p: EmbedPipeline = store::read_versioned(path, PIPELINE_VERSION)?;
        let f = p.tfidf.features.len();
        let consistent = p.tfidf.idf.len() == f
            && p.projector.components.iter().all(|c| c.len() == f)
            && p.projector.mean.len() == p.projector.dim()
            && p.projector.scale.len() == p.projector.dim();
        if !consistent {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                message: "inconsistent array shapes".into(),
            });
        }
        p.tfidf.rebuild_indices();
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("d{i}"), *t, None))
            .collect()
    }

    #[test]
    fn idf_hand_values() {
        let m = fit_tfidf(&docs(&["cat dog", "cat"]), &TfidfConfig::default()).unwrap();
        assert_eq!(m.features(), ["cat", "dog"]);
        assert_eq!(m.idf()[0], 1.0);
        assert!((m.idf()[1] - 1.405465).abs() < 1e-6);
        let v = m.transform("cat dog");
        assert!((v.values[0] - 0.579739).abs() < 1e-6);
        assert!((v.values[1] - 0.814802).abs() < 1e-6);
    }

    #[test]
    fn stopwords_and_numbers() {
        let m = fit_tfidf(&docs(&["the cat", "call 911 now"]), &TfidfConfig::default()).unwrap();
        assert!(m.feature_index("the").is_none());
        assert!(m.feature_index("911").is_none());
        assert!(m.feature_index(NUMBER_MASK).is_some());
        assert!(m.feature_index("cat").is_some());
        assert!(is_number_token("3.14") && is_number_token("(555)") && !is_number_token("--"));
        assert!(!is_number_token("d3w1"));
    }

    #[test]
    fn all_filtered_is_an_error() {
        assert!(matches!(
            fit_tfidf(&docs(&["the a", "of"]), &TfidfConfig::default()),
            Err(Error::EmptyInput(_))
        ));
        assert!(fit_tfidf(&docs(&["one"]), &TfidfConfig::default()).is_err());
    }

    #[test]
    fn transform_norms() {
        let m = fit_tfidf(&docs(&["cat dog", "cat"]), &TfidfConfig::default()).unwrap();
        let one = m.transform("dog");
        assert_eq!(one.indices, [1]);
        assert!((one.norm() - 1.0).abs() < 1e-12);
        assert_eq!(m.transform("zebra").nnz(), 0);
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Vec<SparseVec> {
        (0..n)
            .map(|_| SparseVec {
                indices: (0..f).collect(),
                values: (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn captured_variance_matches_full_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = random_rows(&mut rng, 20, 10);
        let fit = fit_projector(&rows, 10, 3).unwrap();
        let captured: f64 = rows
            .iter()
            .map(|r| fit.projector.project(r).iter().map(|z| z * z).sum::<f64>())
            .sum();
        // Independent route: nalgebra's bidiagonalization SVD of the full matrix.
        let dense = DMatrix::from_fn(20, 10, |i, j| rows[i].values[j]);
        let mut sv: Vec<f64> = dense.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let expected: f64 = sv[..3].iter().map(|s| s * s).sum();
        assert!((captured - expected).abs() < 1e-8, "{captured} vs {expected}");
    }

    #[test]
    fn wide_matrix_uses_row_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = random_rows(&mut rng, 6, 15);
        let fit = fit_projector(&rows, 15, 4).unwrap();
        let dense = DMatrix::from_fn(6, 15, |i, j| rows[i].values[j]);
        let mut sv: Vec<f64> = dense.svd(false, false).singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in fit.projector.singular_values.iter().zip(&sv) {
            assert!((a - b).abs() < 1e-9);
        }
        for c in &fit.projector.components {
            let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn standardized_fit_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random_rows(&mut rng, 30, 8);
        let fit = fit_projector(&rows, 8, 5).unwrap();
        let p = &fit.projector;
        let z: Vec<Vec<f64>> = rows.iter().map(|r| p.standardize(p.project(r))).collect();
        for k in 0..5 {
            let mean = z.iter().map(|v| v[k]).sum::<f64>() / 30.0;
            let var = z.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / 30.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
        // Projected (unstandardized) coordinates are orthogonal across dimensions.
        let raw: Vec<Vec<f64>> = rows.iter().map(|r| p.project(r)).collect();
        for a in 0..5 {
            for b in (a + 1)..5 {
                let m: f64 = raw.iter().map(|v| v[a] * v[b]).sum::<f64>() / 30.0;
                assert!(m.abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rank_one_reconstruction_and_clamp() {
        let base = [1.0, 2.0, -0.5];
        let rows: Vec<SparseVec> = [1.0, -2.0, 0.5, 3.0]
            .iter()
            .map(|s| SparseVec {
                indices: vec![0, 1, 2],
                values: base.iter().map(|b| b * s).collect(),
            })
            .collect();
        let fit = fit_projector(&rows, 3, 2).unwrap();
        assert_eq!(fit.clamped_from, Some(2));
        let p = &fit.projector;
        assert_eq!(p.dim(), 1);
        for r in &rows {
            let back = p.back_project(&p.project(r));
            for (x, y) in back.iter().zip(&r.values) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    fn tiny_pipeline() -> EmbedPipeline {
        let shard = docs(&["cat dog", "cat fish", "bird dog fish", "owl"]);
        let cfg = EmbedConfig {
            dim: 100,
            ..Default::default()
        };
        EmbedPipeline::fit(
            &shard,
            &cfg,
            FitProvenance {
                shard: "test".into(),
                seed: 0,
                documents: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn embedding_bag_of_words_and_determinism() {
        let p = tiny_pipeline();
        assert_eq!(p.embed_document("cat dog"), p.embed_document("dog cat"));
        assert_eq!(p.embed_document("cat dog"), p.embed_document("cat dog"));
        assert_eq!(p.embed_document("zzz").len(), p.dim());
    }

    #[test]
    fn top_terms_edge_cases() {
        let p = tiny_pipeline();
        assert!(p.top_terms(&vec![0.0; p.dim()], 0).unwrap().is_empty());
        assert_eq!(p.top_terms(&vec![0.0; p.dim()], 99).unwrap().len(), 5);
        assert!(p.top_terms(&[0.0], 1).is_err());
    }

    #[test]
    fn rank_sufficient_top_term_is_the_token() {
        let shard = docs(&["cat", "dog", "fish", "cat dog fish"]);
        let p = EmbedPipeline::fit(
            &shard,
            &EmbedConfig::default(),
            FitProvenance {
                shard: "t".into(),
                seed: 0,
                documents: 4,
            },
        )
        .unwrap();
        assert_eq!(p.dim(), 3);
        for t in ["cat", "dog", "fish"] {
            assert_eq!(p.top_terms(&p.embed_document(t), 1).unwrap()[0].0, t);
        }
    }

    #[test]
    fn save_load_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = tiny_pipeline();
        let path = dir.path().join("pipe.json");
        p.save(&path).unwrap();
        let q = EmbedPipeline::load(&path).unwrap();
        for t in ["cat dog", "owl fish 42", "nothing"] {
            assert_eq!(p.embed_document(t), q.embed_document(t));
        }
        assert_eq!(p.to_bytes().unwrap(), q.to_bytes().unwrap());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(
            EmbedPipeline::load(&path),
            Err(Error::CorruptFile { .. })
        ));
    }

    #[test]
    fn refit_gives_identical_files() {
        assert_eq!(
            tiny_pipeline().digest().unwrap(),
            tiny_pipeline().digest().unwrap()
        );
    }
}
