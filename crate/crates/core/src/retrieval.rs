//! Token normalization pipelines and a BM25 inverted index.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::DictionaryGenerator;
use crate::corpus_io::{tokenize_forms, Document, ScoredDoc};
use crate::disambig::Disambiguator;
use crate::error::{Error, Result};
use crate::lemeval::lemmatize_text;

pub const INDEX_FORMAT: &str = "lemir-bm25-index";
pub const INDEX_VERSION: u32 = 1;

/// Common Estonian case and plural endings. Deliberately shallow.
pub const DEFAULT_ESTONIAN_SUFFIXES: &[&str] = &[
    "desse", "tesse", "dele", "tele", "dest", "test", "delt", "telt", "deks", "teks", "dega",
    "tega", "dena", "tena", "deni", "teni", "deta", "teta", "sse", "del", "tel", "st", "le", "lt",
    "ks", "ga", "na", "ni", "ta", "de", "te", "id", "s", "l", "d", "t",
];

/// Strips the longest listed suffix that leaves at least `min_stem`
/// characters, at most once per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixStemmer {
    suffixes: Vec<String>,
    pub min_stem: usize,
}

impl SuffixStemmer {
    pub fn new<S: AsRef<str>>(suffixes: &[S], min_stem: usize) -> Self {
        let mut suffixes: Vec<String> = suffixes
            .iter()
            .map(|s| s.as_ref().to_lowercase())
            .filter(|s| !s.is_empty())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        suffixes.sort_by(|a, b| {
            b.chars()
                .count()
                .cmp(&a.chars().count())
                .then_with(|| a.cmp(b))
        });
        SuffixStemmer { suffixes, min_stem }
    }

    pub fn estonian() -> Self {
        Self::new(DEFAULT_ESTONIAN_SUFFIXES, 3)
    }

    pub fn stem(&self, token: &str) -> String {
        let len = token.chars().count();
        for suffix in &self.suffixes {
            if token.ends_with(suffix.as_str()) && len - suffix.chars().count() >= self.min_stem {
                return token[..token.len() - suffix.len()].to_string();
            }
        }
        token.to_string()
    }
}

#[derive(Clone)]
pub enum NormalizationPipeline {
    /// Tokenize and lowercase.
    Identity,
    /// Identity, then suffix stripping.
    Stemmer(SuffixStemmer),
    /// Lemmas from candidate generation and disambiguation, lowercased.
    Lemmatizer {
        generator: Arc<DictionaryGenerator>,
        disambiguator: Arc<dyn Disambiguator>,
    },
}

impl fmt::Debug for NormalizationPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl NormalizationPipeline {
    pub fn name(&self) -> String {
        match self {
            NormalizationPipeline::Identity => "identity".into(),
            NormalizationPipeline::Stemmer(_) => "stemmer".into(),
            NormalizationPipeline::Lemmatizer { disambiguator, .. } => {
                format!("lemmatizer:{}", disambiguator.name())
            }
        }
    }

    pub fn normalize(&self, text: &str) -> Result<Vec<String>> {
        match self {
            NormalizationPipeline::Identity => Ok(tokenize_forms(text)
                .into_iter()
                .map(|t| t.to_lowercase())
                .collect()),
            NormalizationPipeline::Stemmer(stemmer) => Ok(tokenize_forms(text)
                .into_iter()
                .map(|t| stemmer.stem(&t.to_lowercase()))
                .collect()),
            NormalizationPipeline::Lemmatizer {
                generator,
                disambiguator,
            } => Ok(lemmatize_text(text, generator, disambiguator.as_ref())?
                .into_iter()
                .map(|(_, lemma)| lemma.to_lowercase())
                .collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "k1 must be > 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidInput(format!(
                "b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub format: String,
    pub version: u32,
    pub pipeline: String,
    pub params: Bm25Params,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<u32>,
    /// term → postings sorted by internal doc id
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub avgdl: f64,
}

impl RetrievalIndex {
    /// Index already-normalized documents, in order.
    pub fn from_tokens(
        pipeline: &str,
        params: Bm25Params,
        docs: Vec<(String, Vec<String>)>,
    ) -> Result<Self> {
        params.validate()?;
        if docs.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty corpus".into()));
        }
        let mut seen = HashSet::new();
        let mut index = RetrievalIndex {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            pipeline: pipeline.into(),
            params,
            doc_ids: Vec::with_capacity(docs.len()),
            doc_lengths: Vec::with_capacity(docs.len()),
            postings: BTreeMap::new(),
            avgdl: 0.0,
        };
        for (internal, (doc_id, tokens)) in docs.into_iter().enumerate() {
            if !seen.insert(doc_id.clone()) {
                return Err(Error::DuplicateId(doc_id));
            }
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                index.postings.entry(term).or_default().push(Posting {
                    doc: internal as u32,
                    tf: count,
                });
            }
            index.doc_ids.push(doc_id);
            index.doc_lengths.push(tokens.len() as u32);
        }
        index.recompute_avgdl();
        Ok(index)
    }

    fn recompute_avgdl(&mut self) {
        let total: u64 = self.doc_lengths.iter().map(|&l| l as u64).sum();
        self.avgdl = total as f64 / self.doc_lengths.len() as f64;
    }

    /// Append `other`'s documents after this index's documents.
    pub fn merge(mut self, other: RetrievalIndex) -> Result<Self> {
        if self.pipeline != other.pipeline || self.params != other.params {
            return Err(Error::InvalidInput(
                "cannot merge indexes with different settings".into(),
            ));
        }
        let ids: HashSet<&String> = self.doc_ids.iter().collect();
        if let Some(dup) = other.doc_ids.iter().find(|d| ids.contains(d)) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        let offset = self.doc_ids.len() as u32;
        for (term, postings) in other.postings {
            self.postings
                .entry(term)
                .or_default()
                .extend(postings.into_iter().map(|p| Posting {
                    doc: p.doc + offset,
                    tf: p.tf,
                }));
        }
        self.doc_ids.extend(other.doc_ids);
        self.doc_lengths.extend(other.doc_lengths);
        self.recompute_avgdl();
        Ok(self)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, qtf: u32, idf: f64, tf: u32, doc: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let dl = self.doc_lengths[doc as usize] as f64;
        let norm = if self.avgdl > 0.0 {
            dl / self.avgdl
        } else {
            1.0
        };
        qtf as f64 * idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
    }

    pub fn internal_id(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .map(|i| i as u32)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self> {
        let index: RetrievalIndex = serde_json::from_reader(reader)?;
        if index.format != INDEX_FORMAT || index.version != INDEX_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported index format {} v{}",
                index.format, index.version
            )));
        }
        Ok(index)
    }
}

/// Normalize `title + " " + text` of each document and index the result.
/// Normalization runs in parallel; the index does not depend on thread count.
pub fn build_index(
    documents: &[Document],
    pipeline: &NormalizationPipeline,
    params: Bm25Params,
) -> Result<RetrievalIndex> {
    let docs: Vec<(String, Vec<String>)> = documents
        .par_iter()
        .map(|d| Ok((d.doc_id.clone(), pipeline.normalize(&d.indexed_text())?)))
        .collect::<Result<_>>()?;
    RetrievalIndex::from_tokens(&pipeline.name(), params, docs)
}

fn query_term_counts(query_tokens: &[String]) -> BTreeMap<&str, u32> {
    let mut qtf = BTreeMap::new();
    for t in query_tokens {
        *qtf.entry(t.as_str()).or_default() += 1;
    }
    qtf
}

/// BM25 score of one document (by internal id).
pub fn bm25_score(index: &RetrievalIndex, query_tokens: &[String], doc: u32) -> f64 {
    let mut score = 0.0;
    for (term, qtf) in query_term_counts(query_tokens) {
        let Some(postings) = index.postings.get(term) else {
            continue;
        };
        if let Ok(i) = postings.binary_search_by_key(&doc, |p| p.doc) {
            score += index.term_weight(qtf, index.idf(term), postings[i].tf, doc);
        }
    }
    score
}

/// Top-`k` documents with a positive score, by descending score then
/// ascending doc id.
pub fn search(index: &RetrievalIndex, query_tokens: &[String], k: usize) -> Vec<ScoredDoc> {
    let mut acc: HashMap<u32, f64> = HashMap::new();
    // terms in sorted order so sums match bm25_score bit for bit
    for (term, qtf) in query_term_counts(query_tokens) {
        let Some(postings) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(term);
        for p in postings {
            *acc.entry(p.doc).or_insert(0.0) += index.term_weight(qtf, idf, p.tf, p.doc);
        }
    }
    let mut hits: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
    hits.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.doc_ids[a.0 as usize].cmp(&index.doc_ids[b.0 as usize]))
    });
    hits.truncate(k);
    hits.into_iter()
        .map(|(doc, score)| ScoredDoc {
            doc_id: index.doc_ids[doc as usize].clone(),
            score,
        })
        .collect()
}
