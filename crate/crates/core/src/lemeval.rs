//! Lemmatization pipeline, accuracy and bootstrap confidence intervals.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateLattice, DictionaryGenerator};
use crate::corpus_io::{tokenize_forms, Sentence};
use crate::disambig::Disambiguator;
use crate::error::{Error, Result};

/// Tokenize, generate candidates, disambiguate. Returns `(form, lemma)` per
/// token.
pub fn lemmatize_text(
    text: &str,
    generator: &DictionaryGenerator,
    disambiguator: &dyn Disambiguator,
) -> Result<Vec<(String, String)>> {
    let forms = tokenize_forms(text);
    if forms.is_empty() {
        return Ok(Vec::new());
    }
    let lattice = generator.generate(&Sentence::from_forms("text", &forms));
    let result = disambiguator.disambiguate(&lattice)?;
    Ok(forms
        .into_iter()
        .zip(result.decisions)
        .map(|(f, d)| (f, d.lemma))
        .collect())
}

/// Exact-match share, case-sensitive.
pub fn accuracy<P: AsRef<str>, G: AsRef<str>>(pred: &[P], gold: &[G]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predictions vs {} gold lemmas",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("no tokens to evaluate".into()));
    }
    let correct = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(correct as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceStats {
    pub sentence_id: String,
    pub correct: usize,
    pub total: usize,
}

/// Run `disambiguator` over the lattices and count correct lemmas per
/// sentence. Tokens without a gold lemma are not counted.
pub fn evaluate_sentences(
    lattices: &[CandidateLattice],
    disambiguator: &dyn Disambiguator,
) -> Result<Vec<SentenceStats>> {
    lattices
        .par_iter()
        .map(|lat| {
            let res = disambiguator.disambiguate(lat)?;
            let mut stats = SentenceStats {
                sentence_id: lat.sentence.sentence_id.clone(),
                correct: 0,
                total: 0,
            };
            for (tok, d) in lat.sentence.tokens.iter().zip(&res.decisions) {
                if let Some(gold) = &tok.lemma {
                    stats.total += 1;
                    if gold == &d.lemma {
                        stats.correct += 1;
                    }
                }
            }
            Ok(stats)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            level: 0.95,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub method: String,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_tokens: usize,
    pub n_sentences: usize,
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

/// Percentile bootstrap over sentences.
///
/// Sentences are sorted by id before resampling so the result does not
/// depend on input order. Replicate `i` draws from its own ChaCha stream, so
/// serial and parallel runs agree exactly. Percentiles use the nearest-rank
/// definition.
pub fn bootstrap_ci(
    method: &str,
    stats: &[SentenceStats],
    config: &BootstrapConfig,
) -> Result<AccuracyReport> {
    if stats.is_empty() {
        return Err(Error::InvalidInput(
            "bootstrap needs at least one sentence".into(),
        ));
    }
    if config.replicates == 0 {
        return Err(Error::InvalidInput(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidInput(format!(
            "confidence level {} outside (0, 1)",
            config.level
        )));
    }
    let mut sorted: Vec<&SentenceStats> = stats.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.sentence_id, a.correct, a.total).cmp(&(&b.sentence_id, b.correct, b.total))
    });

    let n_tokens: usize = sorted.iter().map(|s| s.total).sum();
    let n_correct: usize = sorted.iter().map(|s| s.correct).sum();
    if n_tokens == 0 {
        return Err(Error::InvalidInput("no tokens to evaluate".into()));
    }
    let accuracy = n_correct as f64 / n_tokens as f64;

    let n = sorted.len();
    let mut samples: Vec<f64> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(rep as u64);
            let (mut c, mut t) = (0usize, 0usize);
            for _ in 0..n {
                let s = sorted[rng.gen_range(0..n)];
                c += s.correct;
                t += s.total;
            }
            // a replicate drawing only empty sentences counts as the point estimate
            if t == 0 {
                accuracy
            } else {
                c as f64 / t as f64
            }
        })
        .collect();
    samples.sort_by(f64::total_cmp);

    let tail = (1.0 - config.level) / 2.0;
    Ok(AccuracyReport {
        method: method.to_string(),
        accuracy,
        ci_low: nearest_rank(&samples, tail),
        ci_high: nearest_rank(&samples, 1.0 - tail),
        n_tokens,
        n_sentences: n,
        replicates: config.replicates,
        level: config.level,
        seed: config.seed,
    })
}

/// Nearest-rank percentile of sorted data: the value at rank `ceil(p * n)`.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // guard against p * n landing a hair above an integer
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Plain-text table, one row per method: `Method  accuracy [low, high]`.
pub fn format_report_table(reports: &[AccuracyReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  Accuracy [{:.0}% CI]",
        "Method",
        reports.first().map_or(95.0, |r| r.level * 100.0)
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:.3} [{:.3}, {:.3}]",
            r.method, r.accuracy, r.ci_low, r.ci_high
        );
    }
    out
}
