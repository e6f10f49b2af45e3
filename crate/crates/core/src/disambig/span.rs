//! Span-label similarity matching.
//!
//! Every token is a candidate span and every non-trivial candidate rule is a
//! label. A scorer returns a similarity in `[0, 1]` for each span/label pair;
//! a token takes its best-scoring candidate rule when that score reaches the
//! threshold, and otherwise falls back to the do-nothing rule, which is never
//! sent as a label.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{decide, Decision, DisambiguationResult, Disambiguator};
use crate::candidates::CandidateLattice;
use crate::editscript::{fold_str, parse_rule, verbalize_rule, DO_NOTHING};
use crate::error::{Error, Result};
use crate::scorer_bridge::{ProtocolError, ScorerError};

/// Produces a `spans × labels` similarity matrix for one sentence.
pub trait SpanScorer: Send + Sync {
    fn score(
        &self,
        tokens: &[String],
        spans: &[(usize, usize)],
        labels: &[String],
    ) -> Result<Vec<Vec<f64>>, ScorerError>;
}

impl<T: SpanScorer + ?Sized> SpanScorer for &T {
    fn score(
        &self,
        tokens: &[String],
        spans: &[(usize, usize)],
        labels: &[String],
    ) -> Result<Vec<Vec<f64>>, ScorerError> {
        (**self).score(tokens, spans, labels)
    }
}

impl<T: SpanScorer + ?Sized> SpanScorer for Box<T> {
    fn score(
        &self,
        tokens: &[String],
        spans: &[(usize, usize)],
        labels: &[String],
    ) -> Result<Vec<Vec<f64>>, ScorerError> {
        (**self).score(tokens, spans, labels)
    }
}

impl<T: SpanScorer + ?Sized> SpanScorer for std::sync::Arc<T> {
    fn score(
        &self,
        tokens: &[String],
        spans: &[(usize, usize)],
        labels: &[String],
    ) -> Result<Vec<Vec<f64>>, ScorerError> {
        (**self).score(tokens, spans, labels)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerFailurePolicy {
    #[default]
    Fail,
    DoNothing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanMatcherConfig {
    pub threshold: f64,
    pub dim: usize,
    pub window: usize,
    pub scale: f64,
    pub on_scorer_error: ScorerFailurePolicy,
}

impl Default for SpanMatcherConfig {
    fn default() -> Self {
        SpanMatcherConfig {
            threshold: 0.5,
            dim: 256,
            window: 2,
            scale: 5.0,
            on_scorer_error: ScorerFailurePolicy::Fail,
        }
    }
}

impl SpanMatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidInput(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidInput(
                "embedding dimension must be >= 1".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidInput("logistic scale must be finite".into()));
        }
        Ok(())
    }
}

pub fn span_match_disambiguate<S: SpanScorer + ?Sized>(
    lattice: &CandidateLattice,
    scorer: &S,
    config: &SpanMatcherConfig,
) -> Result<DisambiguationResult> {
    let tokens: Vec<String> = lattice
        .sentence
        .tokens
        .iter()
        .map(|t| t.form.clone())
        .collect();
    let scored: Vec<usize> = (0..lattice.sets.len())
        .filter(|&i| lattice.sets[i].rules().any(|r| r != DO_NOTHING))
        .collect();
    let labels: Vec<String> = scored
        .iter()
        .flat_map(|&i| lattice.sets[i].rules().filter(|r| *r != DO_NOTHING))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(String::from)
        .collect();

    let default_all = |score: f64| DisambiguationResult {
        decisions: lattice
            .sets
            .iter()
            .map(|s| decide(s, DO_NOTHING, score))
            .collect(),
    };
    if scored.is_empty() {
        return Ok(default_all(1.0));
    }

    let spans: Vec<(usize, usize)> = scored.iter().map(|&i| (i, i)).collect();
    let matrix = scorer
        .score(&tokens, &spans, &labels)
        .and_then(|m| check_matrix(m, spans.len(), labels.len()));
    let matrix = match matrix {
        Ok(m) => m,
        Err(_) if config.on_scorer_error == ScorerFailurePolicy::DoNothing => {
            return Ok(default_all(0.0))
        }
        Err(source) => {
            return Err(Error::Scorer {
                context: Some(format!(
                    "sentence {}, tokens {:?}",
                    lattice.sentence.sentence_id, tokens
                )),
                source,
            })
        }
    };

    let mut decisions: Vec<Decision> = lattice
        .sets
        .iter()
        .map(|s| decide(s, DO_NOTHING, 1.0))
        .collect();
    for (row, &i) in matrix.iter().zip(&scored) {
        let set = &lattice.sets[i];
        let mut best: Option<(&str, f64)> = None;
        for rule in set.rules().filter(|r| *r != DO_NOTHING) {
            let col = labels
                .binary_search_by(|l| l.as_str().cmp(rule))
                .expect("label present");
            let s = row[col];
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((rule, s));
            }
        }
        let (rule, max) = best.expect("scored token has a label");
        decisions[i] = if max >= config.threshold {
            decide(set, rule, max)
        } else {
            decide(set, DO_NOTHING, 1.0 - max)
        };
    }
    Ok(DisambiguationResult { decisions })
}

fn check_matrix(m: Vec<Vec<f64>>, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>, ScorerError> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(ScorerError::Protocol(ProtocolError::DimensionMismatch {
            expected: (rows, cols),
            found: (m.len(), m.first().map_or(0, Vec::len)),
        }));
    }
    if let Some(&bad) = m
        .iter()
        .flatten()
        .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
    {
        return Err(ScorerError::Protocol(ProtocolError::OutOfRange(bad)));
    }
    Ok(m)
}

/// A span matcher bound to a scorer.
pub struct SpanMatcher<S> {
    pub scorer: S,
    pub config: SpanMatcherConfig,
}

impl<S: SpanScorer> SpanMatcher<S> {
    pub fn new(scorer: S, config: SpanMatcherConfig) -> Self {
        SpanMatcher { scorer, config }
    }
}

impl<S: SpanScorer> Disambiguator for SpanMatcher<S> {
    fn name(&self) -> &str {
        "span-match"
    }

    fn disambiguate(&self, lattice: &CandidateLattice) -> Result<DisambiguationResult> {
        span_match_disambiguate(lattice, &self.scorer, &self.config)
    }
}

// Deterministic hashed-feature embeddings.

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn add_feature(v: &mut [f64], feature: &str) {
    let h = fnv1a(feature.as_bytes());
    let idx = (h % v.len() as u64) as usize;
    v[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
}

/// Character 1-4-grams of `<text>`, skipping grams made only of markers.
fn add_char_ngrams(v: &mut [f64], namespace: &str, text: &str) {
    let chars: Vec<char> = std::iter::once('<')
        .chain(text.chars())
        .chain(std::iter::once('>'))
        .collect();
    let last = chars.len() - 1;
    for n in 1..=4 {
        for start in 0..chars.len().saturating_sub(n - 1) {
            let end = start + n;
            if n == 1 && (start == 0 || start == last) {
                continue;
            }
            let gram: String = chars[start..end].iter().collect();
            add_feature(v, &format!("{namespace}:{gram}"));
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn embed_span(tokens: &[String], start: usize, end: usize, dim: usize, window: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let text = tokens[start..=end]
        .iter()
        .map(|t| fold_str(t))
        .collect::<Vec<_>>()
        .join(" ");
    add_char_ngrams(&mut v, "c", &text);
    for off in 1..=window {
        if let Some(t) = start.checked_sub(off).and_then(|i| tokens.get(i)) {
            add_feature(&mut v, &format!("n-{off}:{}", fold_str(t)));
        }
        if let Some(t) = tokens.get(end + off) {
            add_feature(&mut v, &format!("n+{off}:{}", fold_str(t)));
        }
    }
    normalize(v)
}

/// One L2-normalized vector per token, built from the token's character
/// n-grams and its neighbors within `window` tagged by offset.
pub fn reference_embed_spans(tokens: &[String], dim: usize, window: usize) -> Vec<Vec<f64>> {
    (0..tokens.len())
        .map(|i| embed_span(tokens, i, i, dim, window))
        .collect()
}

/// One L2-normalized vector per label, built from the label's character
/// n-grams and, for rule strings, the words of the rule's description.
pub fn reference_embed_labels(labels: &[String], dim: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|label| {
            let mut v = vec![0.0; dim];
            add_char_ngrams(&mut v, "l", label);
            if let Ok(rule) = parse_rule(label) {
                for word in verbalize_rule(&rule).split_whitespace() {
                    add_feature(&mut v, &format!("w:{word}"));
                }
            }
            normalize(v)
        })
        .collect()
}

pub fn reference_score(span: &[f64], label: &[f64], scale: f64) -> f64 {
    let dot: f64 = span.iter().zip(label).map(|(a, b)| a * b).sum();
    1.0 / (1.0 + (-scale * dot).exp())
}

/// In-process scorer backed by the hashed embeddings. No accuracy claim is
/// attached; it exists so the span matcher runs without an external model.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceScorer {
    pub dim: usize,
    pub window: usize,
    pub scale: f64,
}

impl ReferenceScorer {
    pub fn from_config(config: &SpanMatcherConfig) -> Self {
        ReferenceScorer {
            dim: config.dim,
            window: config.window,
            scale: config.scale,
        }
    }
}

impl Default for ReferenceScorer {
    fn default() -> Self {
        Self::from_config(&SpanMatcherConfig::default())
    }
}

impl SpanScorer for ReferenceScorer {
    fn score(
        &self,
        tokens: &[String],
        spans: &[(usize, usize)],
        labels: &[String],
    ) -> Result<Vec<Vec<f64>>, ScorerError> {
        let label_vecs = reference_embed_labels(labels, self.dim);
        spans
            .iter()
            .map(|&(s, e)| {
                if s > e || e >= tokens.len() {
                    return Err(ScorerError::Protocol(ProtocolError::SpanOutOfRange {
                        start: s,
                        end: e,
                    }));
                }
                let u = embed_span(tokens, s, e, self.dim, self.window);
                Ok(label_vecs
                    .iter()
                    .map(|l| reference_score(&u, l, self.scale))
                    .collect())
            })
            .collect()
    }
}
