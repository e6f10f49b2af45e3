//! First-order HMM over transformation rules with Viterbi decoding.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{decide, DisambiguationResult, Disambiguator};
use crate::candidates::CandidateLattice;
use crate::corpus_io::Sentence;
use crate::editscript::{extract_rule, fold_str, format_rule};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.01;

/// Sentence-start state. Never collides with a rule string, which always
/// starts with `U`.
pub const BOS: &str = "<BOS>";

/// Transition and emission counts with additive smoothing.
///
/// ```text
/// P(r | r') = (c(r', r) + alpha) / (c(r') + alpha * |R|)
/// P(f | r)  = (c(f, r) + beta)   / (c(r)  + beta * (V + 1))
/// ```
///
/// `|R|` is the number of rules seen in training plus one slot for unseen
/// rules; `V` is the number of distinct lowercased training forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub alpha: f64,
    pub beta: f64,
    /// previous state → next rule → count
    pub transitions: BTreeMap<String, BTreeMap<String, u64>>,
    /// rule → lowercased form → count
    pub emissions: BTreeMap<String, BTreeMap<String, u64>>,
    pub transition_totals: BTreeMap<String, u64>,
    pub emission_totals: BTreeMap<String, u64>,
    pub rule_vocab: usize,
    pub form_vocab: usize,
}

impl HmmModel {
    pub fn train(train: &[Sentence], alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "smoothing must be positive and finite (alpha={alpha}, beta={beta})"
            )));
        }
        let mut m = HmmModel {
            alpha,
            beta,
            transitions: BTreeMap::new(),
            emissions: BTreeMap::new(),
            transition_totals: BTreeMap::new(),
            emission_totals: BTreeMap::new(),
            rule_vocab: 0,
            form_vocab: 0,
        };
        let mut forms = BTreeSet::new();
        for sentence in train {
            let mut prev = BOS.to_string();
            for tok in &sentence.tokens {
                // A token without a usable lemma breaks the chain.
                let Some(rule) = tok
                    .lemma
                    .as_deref()
                    .and_then(|l| extract_rule(&tok.form, l).ok())
                else {
                    prev = BOS.to_string();
                    continue;
                };
                let rule = format_rule(&rule);
                let form = fold_str(&tok.form);
                *m.transitions
                    .entry(prev.clone())
                    .or_default()
                    .entry(rule.clone())
                    .or_default() += 1;
                *m.transition_totals.entry(prev).or_default() += 1;
                *m.emissions
                    .entry(rule.clone())
                    .or_default()
                    .entry(form.clone())
                    .or_default() += 1;
                *m.emission_totals.entry(rule.clone()).or_default() += 1;
                forms.insert(form);
                prev = rule;
            }
        }
        m.rule_vocab = m.emission_totals.len();
        m.form_vocab = forms.len();
        Ok(m)
    }

    pub fn log_transition(&self, prev: &str, rule: &str) -> f64 {
        let c = self
            .transitions
            .get(prev)
            .and_then(|t| t.get(rule))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.transition_totals.get(prev).copied().unwrap_or(0) as f64;
        let states = (self.rule_vocab + 1) as f64;
        ((c + self.alpha) / (total + self.alpha * states)).ln()
    }

    /// `form` must already be lowercased with [`fold_str`].
    pub fn log_emission(&self, form: &str, rule: &str) -> f64 {
        let c = self
            .emissions
            .get(rule)
            .and_then(|e| e.get(form))
            .copied()
            .unwrap_or(0) as f64;
        let total = self.emission_totals.get(rule).copied().unwrap_or(0) as f64;
        ((c + self.beta) / (total + self.beta * (self.form_vocab + 1) as f64)).ln()
    }

    /// Most probable state path. `states[t]` lists the allowed rules of token
    /// `t`, sorted ascending; equal scores resolve to the earlier (smaller)
    /// rule, both at each backpointer and at the final state.
    ///
    /// Returns the index path into `states` and its log-probability.
    pub fn viterbi<S: AsRef<str>>(&self, forms: &[String], states: &[Vec<S>]) -> (Vec<usize>, f64) {
        assert_eq!(forms.len(), states.len());
        if forms.is_empty() {
            return (Vec::new(), 0.0);
        }
        let mut delta: Vec<f64> = states[0]
            .iter()
            .map(|r| {
                self.log_transition(BOS, r.as_ref()) + self.log_emission(&forms[0], r.as_ref())
            })
            .collect();
        let mut backptr: Vec<Vec<usize>> = Vec::with_capacity(forms.len());
        backptr.push(Vec::new());

        for t in 1..forms.len() {
            let mut next = Vec::with_capacity(states[t].len());
            let mut bp = Vec::with_capacity(states[t].len());
            for r in &states[t] {
                let r = r.as_ref();
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for (i, prev) in states[t - 1].iter().enumerate() {
                    let s = delta[i] + self.log_transition(prev.as_ref(), r);
                    if best.0 == usize::MAX || s > best.1 {
                        best = (i, s);
                    }
                }
                next.push(best.1 + self.log_emission(&forms[t], r));
                bp.push(best.0);
            }
            delta = next;
            backptr.push(bp);
        }

        let (mut state, score) =
            delta
                .iter()
                .enumerate()
                .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, &s)| {
                    if best.0 == usize::MAX || s > best.1 {
                        (i, s)
                    } else {
                        best
                    }
                });
        let mut path = vec![0; forms.len()];
        for t in (0..forms.len()).rev() {
            path[t] = state;
            if t > 0 {
                state = backptr[t][state];
            }
        }
        (path, score)
    }
}

impl Disambiguator for HmmModel {
    fn name(&self) -> &str {
        "hmm"
    }

    fn disambiguate(&self, lattice: &CandidateLattice) -> Result<DisambiguationResult> {
        let forms: Vec<String> = lattice
            .sentence
            .tokens
            .iter()
            .map(|t| fold_str(&t.form))
            .collect();
        let states: Vec<Vec<&str>> = lattice.sets.iter().map(|s| s.rules().collect()).collect();
        let (path, score) = self.viterbi(&forms, &states);
        let decisions = lattice
            .sets
            .iter()
            .zip(&path)
            .map(|(set, &j)| decide(set, &set.candidates[j].rule, score))
            .collect();
        Ok(DisambiguationResult { decisions })
    }
}
