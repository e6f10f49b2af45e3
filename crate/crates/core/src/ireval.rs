//! Recall@k, MAP@k and Success@k over graded qrels.
//!
//! Grades of 1 and 2 count as relevant. Queries without any relevant
//! document are skipped and reported separately.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{Qrels, RunList, ScoredDoc};

pub const DEFAULT_CUTOFFS: [usize; 3] = [1, 5, 100];

pub fn relevant_set<'a>(qrels: &'a Qrels, query_id: &str) -> HashSet<&'a str> {
    qrels
        .judgments
        .get(query_id)
        .map(|docs| {
            docs.iter()
                .filter(|(_, &g)| g >= 1)
                .map(|(d, _)| d.as_str())
                .collect()
        })
        .unwrap_or_default()
}

fn hits_in_top_k(ranking: &[ScoredDoc], relevant: &HashSet<&str>, k: usize) -> usize {
    ranking
        .iter()
        .take(k)
        .filter(|d| relevant.contains(d.doc_id.as_str()))
        .count()
}

/// `None` when there are no relevant documents.
pub fn recall_at_k(ranking: &[ScoredDoc], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(hits_in_top_k(ranking, relevant, k) as f64 / relevant.len() as f64)
}

pub fn success_at_k(ranking: &[ScoredDoc], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    Some(if hits_in_top_k(ranking, relevant, k) > 0 {
        1.0
    } else {
        0.0
    })
}

/// Sum of precision at each relevant rank within `k`, divided by
/// `min(|relevant|, k)`.
pub fn ap_at_k(ranking: &[ScoredDoc], relevant: &HashSet<&str>, k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return if relevant.is_empty() { None } else { Some(0.0) };
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().take(k).enumerate() {
        if relevant.contains(d.doc_id.as_str()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len().min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Recall,
    Map,
    Success,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Recall, Metric::Map, Metric::Success];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Recall => "Recall",
            Metric::Map => "MAP",
            Metric::Success => "Success",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    /// metric → cutoff → mean over evaluated queries
    pub values: BTreeMap<Metric, BTreeMap<usize, f64>>,
    pub n_queries_evaluated: usize,
    pub n_queries_skipped: usize,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values.get(&metric)?.get(&k).copied()
    }
}

/// Evaluate every query that appears in the qrels or the run.
pub fn evaluate(name: &str, run: &RunList, qrels: &Qrels, cutoffs: &[usize]) -> MetricsReport {
    let queries: BTreeSet<&str> = qrels
        .query_ids()
        .chain(run.results.keys().map(String::as_str))
        .collect();
    let mut sums: BTreeMap<Metric, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut evaluated = 0;
    let mut skipped = 0;
    for qid in queries {
        let relevant = relevant_set(qrels, qid);
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let ranking = run.ranking(qid);
        for &k in cutoffs {
            let values = [
                (Metric::Recall, recall_at_k(ranking, &relevant, k)),
                (Metric::Map, ap_at_k(ranking, &relevant, k)),
                (Metric::Success, success_at_k(ranking, &relevant, k)),
            ];
            for (metric, v) in values {
                *sums.entry(metric).or_default().entry(k).or_default() +=
                    v.expect("relevant set non-empty");
            }
        }
    }
    let values = Metric::ALL
        .iter()
        .map(|&m| {
            let per_k = cutoffs
                .iter()
                .map(|&k| {
                    let sum = sums.get(&m).and_then(|s| s.get(&k)).copied().unwrap_or(0.0);
                    (
                        k,
                        if evaluated > 0 {
                            sum / evaluated as f64
                        } else {
                            0.0
                        },
                    )
                })
                .collect();
            (m, per_k)
        })
        .collect();
    MetricsReport {
        name: name.to_string(),
        values,
        n_queries_evaluated: evaluated,
        n_queries_skipped: skipped,
    }
}

/// One row per report, columns grouped by cutoff: `Recall MAP Success`.
pub fn format_metrics_table(reports: &[MetricsReport], cutoffs: &[usize]) -> String {
    let width = reports
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(0)
        .max("Pipeline".len());
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Pipeline");
    for k in cutoffs {
        for m in Metric::ALL {
            let _ = write!(out, "  {:>11}", format!("{}@{k}", m.label()));
        }
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<width$}", r.name);
        for &k in cutoffs {
            for m in Metric::ALL {
                let _ = write!(out, "  {:>11.4}", r.get(m, k).unwrap_or(0.0));
            }
        }
        out.push('\n');
    }
    out
}
