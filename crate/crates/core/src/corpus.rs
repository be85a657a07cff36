//! Corpus ingestion, synthetic multi-domain corpora, vocabularies and
//! fixed-length sequence packing.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Option<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            label,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        tokenize(&self.text)
    }
}

/// Whitespace tokenization shared by the vocabulary and the LMs.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File { path: PathBuf },
    Synthetic { spec: SyntheticSpec },
    Derived { from: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    pub provenance: Provenance,
}

impl Corpus {
    /// Validates ids (unique) and texts (non-empty after trimming).
    pub fn new(documents: Vec<Document>, provenance: Provenance) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyInput("corpus has no documents".into()));
        }
        let mut seen = HashSet::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(Error::MalformedRecord {
                    line: i + 1,
                    message: format!("document {:?} has empty text", doc.id),
                });
            }
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Corpus {
            documents,
            provenance,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// A new corpus holding the documents at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], tag: &str) -> Result<Corpus> {
        let docs = indices.iter().map(|&i| self.documents[i].clone()).collect();
        Corpus::new(docs, Provenance::Derived { from: tag.into() })
    }

    pub fn labels(&self) -> Vec<Option<&str>> {
        self.documents.iter().map(|d| d.label.as_deref()).collect()
    }

    /// Line-delimited JSON serialization, one record per line.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for doc in &self.documents {
            serde_json::to_writer(&mut out, doc)?;
            out.push(b'\n');
        }
        Ok(out)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: i + 1,
                message: format!("document {:?} has empty text", doc.id),
            });
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no records", path.display())));
    }
    Corpus::new(
        docs,
        Provenance::File {
            path: path.to_path_buf(),
        },
    )
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    store::write_atomic(path, &corpus.to_jsonl()?)
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

fn default_shared_weight() -> f64 {
    0.3
}

/// Generator settings for a corpus of unigram "domains".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub vocab_per_domain: usize,
    pub shared_vocab: usize,
    pub docs_per_domain: usize,
    /// Inclusive (min, max) token counts per document.
    pub doc_length_range: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<Vec<f64>>,
    /// Probability mass each domain gives to the shared vocabulary.
    #[serde(default = "default_shared_weight")]
    pub shared_weight: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_domains: usize, docs_per_domain: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_domains,
            vocab_per_domain: 40,
            shared_vocab: 30,
            docs_per_domain,
            doc_length_range: (40, 80),
            skew: None,
            shared_weight: default_shared_weight(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.n_domains == 0 || self.vocab_per_domain == 0 || self.docs_per_domain == 0 {
            return bad("n_domains, vocab_per_domain and docs_per_domain must be positive");
        }
        let (lo, hi) = self.doc_length_range;
        if lo == 0 || lo > hi {
            return bad("doc_length_range must satisfy 1 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.shared_weight) {
            return bad("shared_weight must lie in [0, 1)");
        }
        if self.shared_weight > 0.0 && self.shared_vocab == 0 {
            return bad("shared_weight > 0 requires shared_vocab > 0");
        }
        if let Some(skew) = &self.skew {
            if skew.len() != self.n_domains {
                return bad("skew must have one multiplier per domain");
            }
            if skew.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
                return bad("skew multipliers must be positive");
            }
        }
        Ok(())
    }

    /// Number of documents generated for `domain`.
    pub fn domain_doc_count(&self, domain: usize) -> usize {
        match &self.skew {
            Some(s) => (s[domain] * self.docs_per_domain as f64).round() as usize,
            None => self.docs_per_domain,
        }
    }

    pub fn domain_label(domain: usize) -> String {
        format!("domain{domain}")
    }

    pub fn domain_token(domain: usize, rank: usize) -> String {
        format!("d{domain}w{rank}")
    }

    pub fn shared_token(rank: usize) -> String {
        format!("s{rank}")
    }
}

/// The exact unigram distribution a domain samples from.
#[derive(Debug, Clone)]
pub struct DomainDistribution {
    pub label: String,
    /// (token, probability), most probable first.
    pub tokens: Vec<(String, f64)>,
}

impl DomainDistribution {
    pub fn probability(&self, token: &str) -> f64 {
        self.tokens
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Generating domain per document, aligned with `corpus.documents()`.
    pub gold: Vec<usize>,
    pub domains: Vec<DomainDistribution>,
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r as f64 + 1.0)).collect()
}

pub fn domain_distributions(spec: &SyntheticSpec) -> Vec<DomainDistribution> {
    let excl = zipf_weights(spec.vocab_per_domain);
    let excl_total: f64 = excl.iter().sum();
    let shared = zipf_weights(spec.shared_vocab);
    let shared_total: f64 = shared.iter().sum();
    (0..spec.n_domains)
        .map(|d| {
            let mut tokens: Vec<(String, f64)> = excl
                .iter()
                .enumerate()
                .map(|(r, w)| {
                    (
                        SyntheticSpec::domain_token(d, r),
                        (1.0 - spec.shared_weight) * w / excl_total,
                    )
                })
                .collect();
            if spec.shared_weight > 0.0 {
                tokens.extend(shared.iter().enumerate().map(|(r, w)| {
                    (
                        SyntheticSpec::shared_token(r),
                        spec.shared_weight * w / shared_total,
                    )
                }));
            }
            tokens.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            DomainDistribution {
                label: SyntheticSpec::domain_label(d),
                tokens,
            }
        })
        .collect()
}

/// Samples every document independently from its domain's unigram
/// distribution. Document order is a seeded shuffle across domains.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let domains = domain_distributions(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.doc_length_range;

    let mut drafts: Vec<(usize, String)> = Vec::new();
    for (d, dist) in domains.iter().enumerate() {
        let sampler = WeightedIndex::new(dist.tokens.iter().map(|(_, p)| *p))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for _ in 0..spec.domain_doc_count(d) {
            let len = rng.gen_range(lo..=hi);
            let words: Vec<&str> = (0..len)
                .map(|_| dist.tokens[sampler.sample(&mut rng)].0.as_str())
                .collect();
            drafts.push((d, words.join(" ")));
        }
    }
    drafts.shuffle(&mut rng);

    let mut gold = Vec::with_capacity(drafts.len());
    let docs = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (d, text))| {
            gold.push(d);
            Document::new(
                format!("syn-{i:06}"),
                text,
                Some(SyntheticSpec::domain_label(d)),
            )
        })
        .collect();
    let corpus = Corpus::new(docs, Provenance::Synthetic { spec: spec.clone() })?;
    Ok(SyntheticCorpus {
        corpus,
        gold,
        domains,
    })
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const BOD: &str = "<bod>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
const SPECIALS: [&str; 3] = [BOD, UNK, PAD];
const VOCAB_VERSION: &str = "cbtm-vocab/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    version: String,
    tokens: Vec<String>,
}

/// Token inventory; ids 0..3 are the begin-of-document, unknown and padding
/// specials, followed by corpus tokens in descending frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const BOD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;
    pub const PAD_ID: u32 = 2;

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..3] != SPECIALS {
            return Err(Error::Integrity("vocabulary specials out of place".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Integrity(format!("token {t:?} listed twice")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Literal special-token strings in text are treated as unknown words.
    pub fn id(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) if id as usize >= SPECIALS.len() => id,
            _ => Self::UNK_ID,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn digest(&self) -> String {
        store::digest_bytes(self.tokens.join("\n").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(
            path,
            &VocabFile {
                version: VOCAB_VERSION.into(),
                tokens: self.tokens.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = store::read_versioned(path, VOCAB_VERSION)?;
        Vocab::from_tokens(file.tokens)
    }
}

/// Keeps the `max_size - 3` most frequent whitespace tokens (ties broken
/// lexicographically) after the three specials.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocab> {
    if max_size < SPECIALS.len() {
        return Err(Error::InvalidConfig(format!(
            "max vocabulary size {max_size} is smaller than the {} special tokens",
            SPECIALS.len()
        )));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for doc in corpus.documents() {
        for tok in doc.tokens() {
            if !SPECIALS.contains(&tok) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(max_size - SPECIALS.len())
                .map(|(t, _)| t.to_string()),
        )
        .collect();
    Vocab::from_tokens(tokens)
}

// ---------------------------------------------------------------------------
// Sequence packing
// ---------------------------------------------------------------------------

/// Fixed-length rows cut from the concatenated `[BOD, tokens...]` stream of a
/// corpus. Documents run across row boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub seq_len: usize,
    pub rows: Vec<Vec<u32>>,
    /// `false` marks padding.
    pub mask: Vec<Vec<bool>>,
    /// Index of the source document for every position (`None` on padding).
    pub doc_of: Vec<Vec<Option<usize>>>,
}

impl SequenceBatch {
    pub fn unmasked(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Positions scored by a next-token model: every unmasked position except
    /// the first of each row, which only serves as context.
    pub fn target_count(&self) -> usize {
        self.mask
            .iter()
            .map(|m| m.iter().skip(1).filter(|&&x| x).count())
            .sum()
    }

    pub fn row_targets(&self, row: usize) -> usize {
        self.mask[row].iter().skip(1).filter(|&&x| x).count()
    }

    /// Inverse of packing: drops padding and splits on begin-of-document.
    pub fn unpack(&self) -> Vec<Vec<u32>> {
        let mut docs: Vec<Vec<u32>> = Vec::new();
        for (row, mask) in self.rows.iter().zip(&self.mask) {
            for (&tok, &m) in row.iter().zip(mask) {
                if !m {
                    continue;
                }
                if tok == Vocab::BOD_ID {
                    docs.push(Vec::new());
                } else if let Some(last) = docs.last_mut() {
                    last.push(tok);
                }
            }
        }
        docs
    }
}

pub fn pack_sequences(corpus: &Corpus, vocab: &Vocab, seq_len: usize) -> Result<SequenceBatch> {
    pack_documents(corpus.documents(), vocab, seq_len)
}

pub fn pack_documents(docs: &[Document], vocab: &Vocab, seq_len: usize) -> Result<SequenceBatch> {
    if seq_len < 2 {
        return Err(Error::InvalidConfig("seq_len must be at least 2".into()));
    }
    if docs.is_empty() {
        return Err(Error::EmptyInput("no documents to pack".into()));
    }
    let mut stream = Vec::new();
    let mut owner = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        stream.push(Vocab::BOD_ID);
        owner.push(i);
        for tok in doc.tokens() {
            stream.push(vocab.id(tok));
            owner.push(i);
        }
    }
    let mut batch = SequenceBatch {
        seq_len,
        rows: Vec::with_capacity(stream.len().div_ceil(seq_len)),
        mask: Vec::new(),
        doc_of: Vec::new(),
    };
    for (chunk, own) in stream.chunks(seq_len).zip(owner.chunks(seq_len)) {
        let mut row = chunk.to_vec();
        let mut mask = vec![true; chunk.len()];
        let mut doc_of: Vec<Option<usize>> = own.iter().map(|&o| Some(o)).collect();
        row.resize(seq_len, Vocab::PAD_ID);
        mask.resize(seq_len, false);
        doc_of.resize(seq_len, None);
        batch.rows.push(row);
        batch.mask.push(mask);
        batch.doc_of.push(doc_of);
    }
    Ok(batch)
}
