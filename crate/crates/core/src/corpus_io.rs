//! Readers and writers for treebanks, document collections, qrels and runs,
//! plus the tokenizer shared by every pipeline.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub form: String,
    pub lemma: Option<String>,
}

impl Token {
    pub fn new(form: impl Into<String>, lemma: Option<&str>) -> Self {
        Token {
            form: form.into(),
            lemma: lemma.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sentence_id: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    /// Sentence without lemmas, e.g. from tokenized raw text.
    pub fn from_forms<S: AsRef<str>>(sentence_id: impl Into<String>, forms: &[S]) -> Self {
        Sentence {
            sentence_id: sentence_id.into(),
            tokens: forms.iter().map(|f| Token::new(f.as_ref(), None)).collect(),
        }
    }

    /// Sentence with gold lemmas.
    pub fn from_pairs<F: AsRef<str>, L: AsRef<str>>(
        sentence_id: impl Into<String>,
        pairs: &[(F, L)],
    ) -> Self {
        Sentence {
            sentence_id: sentence_id.into(),
            tokens: pairs
                .iter()
                .map(|(f, l)| Token::new(f.as_ref(), Some(l.as_ref())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Read the ID, FORM and LEMMA columns of a CoNLL-U stream.
///
/// Multiword token ranges (`3-4`) and empty nodes (`3.1`) are skipped. A
/// LEMMA of `_` is treated as missing unless the form itself is `_`.
/// Sentences without a `# sent_id` comment are numbered `s1`, `s2`, ...
pub fn parse_conllu<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut sent_id: Option<String> = None;

    let mut flush = |tokens: &mut Vec<Token>, sent_id: &mut Option<String>| {
        if !tokens.is_empty() {
            let id = sent_id
                .take()
                .unwrap_or_else(|| format!("s{}", sentences.len() + 1));
            sentences.push(Sentence {
                sentence_id: id,
                tokens: std::mem::take(tokens),
            });
        }
        *sent_id = None;
    };

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        let line_no = idx + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut sent_id);
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    sent_id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::parse(
                line_no,
                format!(
                    "expected at least 3 tab-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        let id = fields[0];
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let form = fields[1];
        if form.is_empty() {
            return Err(Error::parse(line_no, "empty FORM"));
        }
        let lemma = match fields[2] {
            "" => None,
            "_" if form != "_" => None,
            l => Some(l.to_string()),
        };
        tokens.push(Token {
            form: form.to_string(),
            lemma,
        });
    }
    flush(&mut tokens, &mut sent_id);
    Ok(sentences)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextToken {
    pub form: String,
    /// Offsets in Unicode scalar values, end exclusive.
    pub char_start: usize,
    pub char_end: usize,
}

/// Split text into maximal runs of letters/digits; any other non-whitespace
/// character becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<TextToken> {
    let mut out = Vec::new();
    let mut run: Option<(usize, String)> = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            run.get_or_insert_with(|| (pos, String::new())).1.push(c);
        } else {
            if let Some((start, form)) = run.take() {
                out.push(TextToken {
                    form,
                    char_start: start,
                    char_end: pos,
                });
            }
            if !c.is_whitespace() {
                out.push(TextToken {
                    form: c.to_string(),
                    char_start: pos,
                    char_end: pos + 1,
                });
            }
        }
        pos += 1;
    }
    if let Some((start, form)) = run {
        out.push(TextToken {
            form,
            char_start: start,
            char_end: pos,
        });
    }
    out
}

pub fn tokenize_forms(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.form).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
}

impl Document {
    /// The text that gets indexed.
    pub fn indexed_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }
}

/// Streams documents from a JSONL source, one record per line.
pub struct JsonlRecords<R, T> {
    lines: std::iter::Enumerate<std::io::Lines<R>>,
    _marker: std::marker::PhantomData<T>,
}

impl<R: BufRead, T: for<'de> Deserialize<'de>> Iterator for JsonlRecords<R, T> {
    type Item = Result<(usize, T)>;

    fn next(&mut self) -> Option<Self::Item> {
        for (idx, line) in self.lines.by_ref() {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                serde_json::from_str(&line)
                    .map(|v| (idx + 1, v))
                    .map_err(|e| Error::parse(idx + 1, e.to_string())),
            );
        }
        None
    }
}

/// Iterate JSON records line by line, skipping blank lines. Items carry their
/// 1-based line number.
pub fn jsonl_records<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> JsonlRecords<R, T> {
    JsonlRecords {
        lines: reader.lines().enumerate(),
        _marker: std::marker::PhantomData,
    }
}

pub fn load_jsonl_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for rec in jsonl_records::<_, Document>(reader) {
        let (line, doc) = rec?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::parse(
                line,
                format!("duplicate doc_id `{}`", doc.doc_id),
            ));
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

pub fn load_queries<R: BufRead>(reader: R) -> Result<Vec<Query>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in jsonl_records::<_, Query>(reader) {
        let (line, q) = rec?;
        if !seen.insert(q.query_id.clone()) {
            return Err(Error::parse(
                line,
                format!("duplicate query_id `{}`", q.query_id),
            ));
        }
        out.push(q);
    }
    Ok(out)
}

/// Graded relevance judgments, query id → doc id → grade in {0, 1, 2}.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u8>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u8) -> Result<()> {
        if grade > 2 {
            return Err(Error::InvalidInput(format!(
                "grade {grade} outside {{0,1,2}}"
            )));
        }
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u8> {
        self.judgments.get(query_id)?.get(doc_id).copied()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }
}

/// Read TREC qrels lines: `qid 0 docid grade`.
pub fn load_qrels<R: BufRead>(reader: R) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(line_no, "qrels line must have 4 fields"));
        }
        let grade: u8 = fields[3]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad grade `{}`", fields[3])))?;
        if grade > 2 {
            return Err(Error::parse(
                line_no,
                format!("grade {grade} outside {{0,1,2}}"),
            ));
        }
        qrels.insert(fields[0], fields[2], grade)?;
    }
    Ok(qrels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Ranked results per query; position in the list is the rank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunList {
    pub results: BTreeMap<String, Vec<ScoredDoc>>,
}

impl RunList {
    pub fn ranking(&self, query_id: &str) -> &[ScoredDoc] {
        self.results.get(query_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks rank invariants: non-increasing scores, unique doc ids.
    pub fn validate(&self) -> Result<()> {
        for (qid, docs) in &self.results {
            let mut seen = HashSet::new();
            for pair in docs.windows(2) {
                if pair[1].score > pair[0].score {
                    return Err(Error::InvalidInput(format!(
                        "query {qid}: scores increase at `{}`",
                        pair[1].doc_id
                    )));
                }
            }
            for d in docs {
                if !seen.insert(&d.doc_id) {
                    return Err(Error::InvalidInput(format!(
                        "query {qid}: duplicate doc `{}`",
                        d.doc_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Read TREC run lines: `qid Q0 docid rank score tag`.
pub fn load_run<R: BufRead>(reader: R) -> Result<RunList> {
    let mut raw: BTreeMap<String, Vec<(usize, usize, ScoredDoc)>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(Error::parse(line_no, "run line must have 6 fields"));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad rank `{}`", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(line_no, format!("bad score `{}`", fields[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(line_no, "non-finite score"));
        }
        raw.entry(fields[0].to_string()).or_default().push((
            rank,
            line_no,
            ScoredDoc {
                doc_id: fields[2].to_string(),
                score,
            },
        ));
    }

    let mut run = RunList::default();
    for (qid, mut entries) in raw {
        entries.sort_by_key(|(rank, _, _)| *rank);
        let mut seen = HashSet::new();
        let mut docs = Vec::with_capacity(entries.len());
        for (expected, (rank, line_no, doc)) in entries.into_iter().enumerate() {
            if rank != expected + 1 {
                return Err(Error::parse(
                    line_no,
                    format!("query {qid}: ranks must be contiguous from 1, found {rank}"),
                ));
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::parse(
                    line_no,
                    format!("query {qid}: duplicate doc `{}`", doc.doc_id),
                ));
            }
            if let Some(prev) = docs.last() {
                let prev: &ScoredDoc = prev;
                if doc.score > prev.score {
                    return Err(Error::parse(
                        line_no,
                        format!("query {qid}: scores must be non-increasing"),
                    ));
                }
            }
            docs.push(doc);
        }
        run.results.insert(qid, docs);
    }
    Ok(run)
}

pub fn write_run<W: Write>(run: &RunList, tag: &str, mut out: W) -> Result<()> {
    for (qid, docs) in &run.results {
        for (i, d) in docs.iter().enumerate() {
            writeln!(out, "{qid} Q0 {} {} {:.6} {tag}", d.doc_id, i + 1, d.score)?;
        }
    }
    Ok(())
}
