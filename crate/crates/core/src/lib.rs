//! Lemma candidate disambiguation and lexical retrieval evaluation.
//!
//! The crate is organized along the pipeline:
//!
//! * [`editscript`]: transformation rules between forms and lemmas, used as
//!   classification labels.
//! * [`corpus_io`]: CoNLL-U, JSONL documents, TREC qrels and runs, and the
//!   shared tokenizer.
//! * [`candidates`]: per-token lemma candidates and lattices.
//! * [`disambig`]: oracle, frequency, HMM and span-label matching
//!   disambiguators.
//! * [`scorer_bridge`]: line-delimited JSON protocol for external scorers.
//! * [`lemeval`]: end-to-end lemmatization, accuracy and bootstrap CIs.
//! * [`retrieval`]: normalization pipelines and BM25.
//! * [`ireval`]: Recall@k, MAP@k and Success@k.

pub mod candidates;
pub mod corpus_io;
pub mod disambig;
pub mod editscript;
pub mod error;
pub mod ireval;
pub mod lemeval;
pub mod model;
pub mod retrieval;
pub mod scorer_bridge;

pub use candidates::{CandidateLattice, CandidateSet, DictionaryGenerator};
pub use corpus_io::{Document, Qrels, RunList, ScoredDoc, Sentence, Token};
pub use disambig::{
    DisambiguationResult, Disambiguator, FrequencyModel, HmmModel, SpanMatcherConfig, SpanScorer,
};
pub use editscript::{
    apply_rule, extract_rule, format_rule, parse_rule, TransformationRule, DO_NOTHING,
};
pub use error::{Error, Result, RuleError};
pub use retrieval::{Bm25Params, NormalizationPipeline, RetrievalIndex};
