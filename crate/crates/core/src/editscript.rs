//! Transformation rules between surface forms and lemmas.
//!
//! A rule is a shortest edit script anchored at the word edges: the
//! lowercased form and lemma share a longest common substring, everything
//! before it is rewritten by the prefix script and everything after it by
//! the suffix script. Casing is restored afterwards from the uppercase runs
//! of the lemma. Because the edits only reference the affixes, the same rule
//! applies to every sufficiently long form ("remove the last letter").
//!
//! Canonical string grammar:
//!
//! ```text
//! U<start>:<len>[,<start>:<len>...]|P<ops>|S<ops>
//! ```
//!
//! where `<ops>` is zero or more `-` followed by zero or more `+<char>`.
//! All indices count Unicode scalar values.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::RuleError;

/// Canonical string of the rule that leaves a (lowercased) form unchanged.
pub const DO_NOTHING: &str = "U|P|S";

/// Lowercase a character only when the mapping is one-to-one and reversible,
/// so that uppercasing the result restores the original character.
pub fn fold_char(c: char) -> char {
    match single(c.to_lowercase()) {
        Some(lower) if lower != c && single(lower.to_uppercase()) == Some(c) => lower,
        _ => c,
    }
}

/// Apply [`fold_char`] to every character; the result has the same length in
/// characters as the input.
pub fn fold_str(s: &str) -> String {
    s.chars().map(fold_char).collect()
}

fn is_restorable_upper(c: char) -> bool {
    fold_char(c) != c
}

fn upper_char(c: char) -> char {
    single(c.to_uppercase()).unwrap_or(c)
}

fn single(mut it: impl Iterator<Item = char>) -> Option<char> {
    let first = it.next()?;
    match it.next() {
        None => Some(first),
        Some(_) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditOp {
    Delete,
    Insert(char),
}

/// Edits at one word edge: delete `delete` characters, then insert `insert`.
///
/// For the prefix the deleted characters are the first ones of the form and
/// `insert` is prepended; for the suffix they are the last ones and `insert`
/// is appended.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AffixEdit {
    pub delete: usize,
    pub insert: String,
}

impl AffixEdit {
    pub fn is_empty(&self) -> bool {
        self.delete == 0 && self.insert.is_empty()
    }

    pub fn ops(&self) -> Vec<EditOp> {
        std::iter::repeat(EditOp::Delete)
            .take(self.delete)
            .chain(self.insert.chars().map(EditOp::Insert))
            .collect()
    }

    /// Build from an op list in canonical order (all deletes, then inserts).
    pub fn from_ops(ops: &[EditOp]) -> Result<Self, RuleError> {
        let mut edit = AffixEdit::default();
        for op in ops {
            match *op {
                EditOp::Delete if edit.insert.is_empty() => edit.delete += 1,
                EditOp::Delete => {
                    return Err(RuleError::InvalidInput(
                        "delete after insert is not canonical".into(),
                    ))
                }
                EditOp::Insert(c) => edit.insert.push(c),
            }
        }
        Ok(edit)
    }

    fn write_ops(&self, out: &mut String) {
        for _ in 0..self.delete {
            out.push('-');
        }
        for c in self.insert.chars() {
            out.push('+');
            out.push(c);
        }
    }
}

/// A contiguous run of characters to uppercase in the produced lemma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaseRange {
    pub start: usize,
    pub len: usize,
}

impl CaseRange {
    fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransformationRule {
    pub casing: Vec<CaseRange>,
    pub prefix: AffixEdit,
    pub suffix: AffixEdit,
}

impl TransformationRule {
    pub fn do_nothing() -> Self {
        Self::default()
    }

    pub fn is_do_nothing(&self) -> bool {
        self.casing.is_empty() && self.prefix.is_empty() && self.suffix.is_empty()
    }

    /// Checks the structural invariants: casing ranges non-empty, sorted,
    /// disjoint and not adjacent (adjacent runs would have a second spelling).
    pub fn validate(&self) -> Result<(), RuleError> {
        let mut prev_end: Option<usize> = None;
        for range in &self.casing {
            if range.len == 0 {
                return Err(RuleError::InvalidInput("empty casing range".into()));
            }
            if let Some(end) = prev_end {
                if range.start <= end {
                    return Err(RuleError::InvalidInput(
                        "casing ranges must be sorted, disjoint and non-adjacent".into(),
                    ));
                }
            }
            prev_end = Some(range.end());
        }
        Ok(())
    }
}

/// Derive the rule mapping `form` to `lemma`.
pub fn extract_rule(form: &str, lemma: &str) -> Result<TransformationRule, RuleError> {
    if form.is_empty() || lemma.is_empty() {
        return Err(RuleError::InvalidInput(
            "form and lemma must be non-empty".into(),
        ));
    }
    let f: Vec<char> = form.chars().map(fold_char).collect();
    let lemma_chars: Vec<char> = lemma.chars().collect();
    let l: Vec<char> = lemma_chars.iter().copied().map(fold_char).collect();

    let (fs, ls, len) = longest_common_substring(&f, &l);

    let prefix = AffixEdit {
        delete: fs,
        insert: l[..ls].iter().collect(),
    };
    let suffix = AffixEdit {
        delete: f.len() - fs - len,
        insert: l[ls + len..].iter().collect(),
    };

    let mut casing = Vec::new();
    let mut i = 0;
    while i < lemma_chars.len() {
        if is_restorable_upper(lemma_chars[i]) {
            let start = i;
            while i < lemma_chars.len() && is_restorable_upper(lemma_chars[i]) {
                i += 1;
            }
            casing.push(CaseRange {
                start,
                len: i - start,
            });
        } else {
            i += 1;
        }
    }

    Ok(TransformationRule {
        casing,
        prefix,
        suffix,
    })
}

/// Returns `(start in a, start in b, length)`. Ties resolve to the earliest
/// start in `a`, then in `b`; no common character yields `(0, 0, 0)`.
fn longest_common_substring(a: &[char], b: &[char]) -> (usize, usize, usize) {
    let mut best = (0, 0, 0);
    // run[j + 1] = length of the common run ending at a[i], b[j]
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 0..a.len() {
        for j in 0..b.len() {
            cur[j + 1] = if a[i] == b[j] { prev[j] + 1 } else { 0 };
            let len = cur[j + 1];
            if len == 0 {
                continue;
            }
            let cand = (i + 1 - len, j + 1 - len, len);
            if len > best.2 || (len == best.2 && (cand.0, cand.1) < (best.0, best.1)) {
                best = cand;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Apply `rule` to `form`, producing the lemma.
pub fn apply_rule(form: &str, rule: &TransformationRule) -> Result<String, RuleError> {
    if form.is_empty() {
        return Err(RuleError::InvalidInput("form must be non-empty".into()));
    }
    let f: Vec<char> = form.chars().map(fold_char).collect();
    let incompatible = |reason: String| RuleError::Incompatible {
        rule: format_rule(rule),
        form: form.to_string(),
        reason,
    };
    let deletes = rule.prefix.delete + rule.suffix.delete;
    if deletes > f.len() {
        return Err(incompatible(format!(
            "{deletes} deletions exceed form length {}",
            f.len()
        )));
    }

    let mut out: Vec<char> = rule.prefix.insert.chars().collect();
    out.extend_from_slice(&f[rule.prefix.delete..f.len() - rule.suffix.delete]);
    out.extend(rule.suffix.insert.chars());

    for range in &rule.casing {
        if range.end() > out.len() {
            return Err(incompatible(format!(
                "casing range {}:{} beyond lemma length {}",
                range.start,
                range.len,
                out.len()
            )));
        }
        for c in &mut out[range.start..range.end()] {
            *c = upper_char(*c);
        }
    }
    Ok(out.into_iter().collect())
}

/// Apply a rule given by its canonical string.
pub fn apply_rule_str(form: &str, rule: &str) -> Result<String, RuleError> {
    apply_rule(form, &parse_rule(rule)?)
}

pub fn format_rule(rule: &TransformationRule) -> String {
    let mut out = String::from("U");
    for (i, r) in rule.casing.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{}:{}", r.start, r.len));
    }
    out.push_str("|P");
    rule.prefix.write_ops(&mut out);
    out.push_str("|S");
    rule.suffix.write_ops(&mut out);
    out
}

pub fn parse_rule(input: &str) -> Result<TransformationRule, RuleError> {
    let err = |reason: &str| RuleError::Parse {
        input: input.to_string(),
        reason: reason.to_string(),
    };

    let rest = input.strip_prefix('U').ok_or_else(|| err("expected `U`"))?;
    let bar = rest.find('|').ok_or_else(|| err("missing `|P` section"))?;
    let casing_src = &rest[..bar];
    let rest = rest[bar..]
        .strip_prefix("|P")
        .ok_or_else(|| err("expected `|P`"))?;

    let mut casing = Vec::new();
    if !casing_src.is_empty() {
        for item in casing_src.split(',') {
            let (start, len) = item
                .split_once(':')
                .ok_or_else(|| err("casing range must be <start>:<len>"))?;
            let start = parse_index(start).ok_or_else(|| err("bad casing start"))?;
            let len = parse_index(len).ok_or_else(|| err("bad casing length"))?;
            casing.push(CaseRange { start, len });
        }
    }

    let mut chars = rest.chars();
    let prefix = parse_ops(&mut chars, true).map_err(|r| err(r))?;
    let suffix = parse_ops(&mut chars, false).map_err(|r| err(r))?;

    let rule = TransformationRule {
        casing,
        prefix,
        suffix,
    };
    rule.validate().map_err(|e| match e {
        RuleError::InvalidInput(reason) => err(&reason),
        other => other,
    })?;
    Ok(rule)
}

fn parse_index(s: &str) -> Option<usize> {
    // Reject signs and leading zeros so that the string form stays canonical.
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0'))
    {
        return None;
    }
    s.parse().ok()
}

/// Parse ops until `|S` (prefix section) or end of input (suffix section).
fn parse_ops(chars: &mut std::str::Chars<'_>, prefix: bool) -> Result<AffixEdit, &'static str> {
    let mut edit = AffixEdit::default();
    loop {
        match chars.next() {
            None if prefix => return Err("missing `|S` section"),
            None => return Ok(edit),
            Some('|') if prefix => {
                return match chars.next() {
                    Some('S') => Ok(edit),
                    _ => Err("expected `|S`"),
                };
            }
            Some('-') if edit.insert.is_empty() => edit.delete += 1,
            Some('-') => return Err("delete after insert is not canonical"),
            Some('+') => match chars.next() {
                Some(c) => edit.insert.push(c),
                None => return Err("`+` without a character"),
            },
            Some(_) => return Err("unexpected character in edit ops"),
        }
    }
}

impl fmt::Display for TransformationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_rule(self))
    }
}

impl FromStr for TransformationRule {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_rule(s)
    }
}

/// Short English description of a rule.
pub fn verbalize_rule(rule: &TransformationRule) -> String {
    if rule.is_do_nothing() {
        return "do nothing".to_string();
    }
    let mut parts = Vec::new();
    if rule.prefix.delete > 0 {
        parts.push(format!("remove the {} first letter(s)", rule.prefix.delete));
    }
    if !rule.prefix.insert.is_empty() {
        parts.push(format!("prepend '{}'", rule.prefix.insert));
    }
    if rule.suffix.delete > 0 {
        parts.push(format!("remove the {} last letter(s)", rule.suffix.delete));
    }
    if !rule.suffix.insert.is_empty() {
        parts.push(format!("append '{}'", rule.suffix.insert));
    }
    if !rule.casing.is_empty() {
        let ranges: Vec<String> = rule
            .casing
            .iter()
            .map(|r| format!("{}..{}", r.start, r.end()))
            .collect();
        parts.push(format!("upper case letters {}", ranges.join(",")));
    }
    parts.join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFrequency {
    pub rule: String,
    pub count: u64,
    pub share: f64,
}

/// Rule counts sorted by descending count; among equal counts the do-nothing
/// rule comes first, the rest by rule string.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleFrequencyTable {
    pub total: u64,
    pub entries: Vec<RuleFrequency>,
}

impl RuleFrequencyTable {
    pub fn get(&self, rule: &str) -> Option<&RuleFrequency> {
        self.entries.iter().find(|e| e.rule == rule)
    }

    /// Write `rule<TAB>count<TAB>share` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{:.6}", e.rule, e.count, e.share)?;
        }
        Ok(())
    }
}

/// Count the rules extracted from every `(form, lemma)` pair.
pub fn rule_frequency_table<I, F, L>(pairs: I) -> Result<RuleFrequencyTable, RuleError>
where
    I: IntoIterator<Item = (F, L)>,
    F: AsRef<str>,
    L: AsRef<str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut total = 0u64;
    for (idx, (form, lemma)) in pairs.into_iter().enumerate() {
        let (form, lemma) = (form.as_ref(), lemma.as_ref());
        let rule = extract_rule(form, lemma).map_err(|e| {
            RuleError::InvalidInput(format!("pair #{idx} ({form:?}, {lemma:?}): {e}"))
        })?;
        *counts.entry(format_rule(&rule)).or_default() += 1;
        total += 1;
    }
    let mut entries: Vec<RuleFrequency> = counts
        .into_iter()
        .map(|(rule, count)| RuleFrequency {
            rule,
            count,
            share: count as f64 / total as f64,
        })
        .collect();
    // count ties: do-nothing first, then by rule string
    entries.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| (b.rule == DO_NOTHING).cmp(&(a.rule == DO_NOTHING)))
            .then_with(|| a.rule.cmp(&b.rule))
    });
    Ok(RuleFrequencyTable { total, entries })
}
