use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{decide, DisambiguationResult, Disambiguator};
use crate::candidates::{CandidateLattice, CandidateSet, MAX_SUFFIX_LEN};
use crate::corpus_io::Sentence;
use crate::editscript::{extract_rule, fold_str, format_rule};
use crate::error::Result;

type Counts = BTreeMap<String, u64>;

/// Rule counts by form, by form suffix and globally.
///
/// Decision chain: the candidate with the highest count for the lowercased
/// form; otherwise for the longest suffix with any candidate count; otherwise
/// globally; otherwise the lexicographically smallest candidate rule. Count
/// ties also resolve to the smallest rule string.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyModel {
    pub form_counts: BTreeMap<String, Counts>,
    pub suffix_counts: BTreeMap<String, Counts>,
    pub global_counts: Counts,
}

impl FrequencyModel {
    pub fn train(train: &[Sentence]) -> Self {
        let mut m = FrequencyModel::default();
        for tok in train.iter().flat_map(|s| &s.tokens) {
            let Some(lemma) = tok.lemma.as_deref() else {
                continue;
            };
            let Ok(rule) = extract_rule(&tok.form, lemma) else {
                continue;
            };
            let rule = format_rule(&rule);
            let key = fold_str(&tok.form);
            *m.form_counts
                .entry(key.clone())
                .or_default()
                .entry(rule.clone())
                .or_default() += 1;
            let chars: Vec<char> = key.chars().collect();
            for len in 1..=MAX_SUFFIX_LEN.min(chars.len()) {
                let suffix: String = chars[chars.len() - len..].iter().collect();
                *m.suffix_counts
                    .entry(suffix)
                    .or_default()
                    .entry(rule.clone())
                    .or_default() += 1;
            }
            *m.global_counts.entry(rule).or_default() += 1;
        }
        m
    }

    fn choose(&self, form: &str, set: &CandidateSet) -> (String, f64) {
        let key = fold_str(form);
        let chars: Vec<char> = key.chars().collect();
        let suffix_tables = (1..=MAX_SUFFIX_LEN.min(chars.len()))
            .rev()
            .filter_map(|len| {
                let suffix: String = chars[chars.len() - len..].iter().collect();
                self.suffix_counts.get(&suffix)
            });
        let tables = self
            .form_counts
            .get(&key)
            .into_iter()
            .chain(suffix_tables)
            .chain(std::iter::once(&self.global_counts));
        for table in tables {
            if let Some(pick) = argmax(table, set) {
                return pick;
            }
        }
        let first = set.candidates[0].rule.clone();
        (first, 0.0)
    }
}

/// Highest-count candidate in `table`; score is its share among the
/// candidates' counts. `None` when no candidate has a count.
fn argmax(table: &Counts, set: &CandidateSet) -> Option<(String, f64)> {
    let mut best: Option<(&str, u64)> = None;
    let mut total = 0;
    // candidates are sorted by rule, so strict `>` keeps the smallest on ties
    for rule in set.rules() {
        let count = table.get(rule).copied().unwrap_or(0);
        total += count;
        if count > 0 && best.map_or(true, |(_, c)| count > c) {
            best = Some((rule, count));
        }
    }
    best.map(|(rule, count)| (rule.to_string(), count as f64 / total as f64))
}

impl Disambiguator for FrequencyModel {
    fn name(&self) -> &str {
        "frequency"
    }

    fn disambiguate(&self, lattice: &CandidateLattice) -> Result<DisambiguationResult> {
        let decisions = lattice
            .sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let (rule, score) = self.choose(lattice.form(i), set);
                decide(set, &rule, score)
            })
            .collect();
        Ok(DisambiguationResult { decisions })
    }
}
