//! Strategies that pick one candidate rule per token.

mod frequency;
mod hmm;
mod span;

use serde::{Deserialize, Serialize};

pub use frequency::FrequencyModel;
pub use hmm::{HmmModel, DEFAULT_ALPHA, DEFAULT_BETA};
pub use span::{
    reference_embed_labels, reference_embed_spans, reference_score, span_match_disambiguate,
    ReferenceScorer, ScorerFailurePolicy, SpanMatcher, SpanMatcherConfig, SpanScorer,
};

use crate::candidates::{CandidateLattice, CandidateSet};
use crate::corpus_io::Sentence;
use crate::editscript::DO_NOTHING;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub rule: String,
    pub lemma: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisambiguationResult {
    pub decisions: Vec<Decision>,
}

impl DisambiguationResult {
    pub fn lemmas(&self) -> impl Iterator<Item = &str> {
        self.decisions.iter().map(|d| d.lemma.as_str())
    }

    pub fn rules(&self) -> impl Iterator<Item = &str> {
        self.decisions.iter().map(|d| d.rule.as_str())
    }
}

pub trait Disambiguator: Send + Sync {
    fn name(&self) -> &str;

    fn disambiguate(&self, lattice: &CandidateLattice) -> Result<DisambiguationResult>;
}

pub(crate) fn decide(set: &CandidateSet, rule: &str, score: f64) -> Decision {
    let (rule, lemma) = match set.lemma_of(rule) {
        Some(lemma) => (rule, lemma),
        None => (
            DO_NOTHING,
            set.lemma_of(DO_NOTHING)
                .expect("do-nothing candidate present"),
        ),
    };
    Decision {
        rule: rule.to_string(),
        lemma: lemma.to_string(),
        score,
    }
}

/// Choose the gold lemma's rule when the gold lemma is a candidate (score
/// 1.0), otherwise the do-nothing rule (score 0.0).
pub fn oracle_disambiguate(
    lattice: &CandidateLattice,
    gold: &Sentence,
) -> Result<DisambiguationResult> {
    if lattice.sets.len() != gold.tokens.len() {
        return Err(Error::Alignment(format!(
            "sentence {}: {} candidate sets vs {} gold tokens",
            gold.sentence_id,
            lattice.sets.len(),
            gold.tokens.len()
        )));
    }
    let decisions = lattice
        .sets
        .iter()
        .zip(&gold.tokens)
        .map(|(set, tok)| {
            let hit = tok
                .lemma
                .as_ref()
                .and_then(|g| set.candidates.iter().find(|c| &c.lemma == g));
            match hit {
                Some(c) => decide(set, &c.rule, 1.0),
                None => decide(set, DO_NOTHING, 0.0),
            }
        })
        .collect();
    Ok(DisambiguationResult { decisions })
}

/// Oracle that reads gold lemmas from the lattice's own sentence.
#[derive(Debug, Clone, Copy, Default)]
pub struct Oracle;

impl Disambiguator for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn disambiguate(&self, lattice: &CandidateLattice) -> Result<DisambiguationResult> {
        oracle_disambiguate(lattice, &lattice.sentence)
    }
}

/// Trained count tables, serialized together with a format version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DisambiguatorModel {
    Frequency(FrequencyModel),
    Hmm(HmmModel),
}

impl DisambiguatorModel {
    pub fn as_disambiguator(&self) -> &dyn Disambiguator {
        match self {
            DisambiguatorModel::Frequency(m) => m,
            DisambiguatorModel::Hmm(m) => m,
        }
    }
}
