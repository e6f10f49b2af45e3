//! Lemma candidate generation and candidate lattices.
//!
//! The disambiguators never see lemmas directly: each candidate carries the
//! canonical string of the rule that produces it from the token's form.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{jsonl_records, Sentence, Token};
use crate::editscript::{
    apply_rule, apply_rule_str, extract_rule, fold_str, format_rule, parse_rule, DO_NOTHING,
};
use crate::error::{Error, Result};

/// Longest form suffix used for backoff.
pub const MAX_SUFFIX_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Candidate {
    pub rule: String,
    pub lemma: String,
}

/// Candidates of one token, sorted by rule string, unique per rule. Always
/// contains the do-nothing rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub token_index: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    /// Build from lemma strings. Lemmas that are empty are rejected.
    pub fn from_lemmas<S: AsRef<str>>(
        token_index: usize,
        form: &str,
        lemmas: &[S],
    ) -> Result<Self> {
        let mut by_rule = BTreeMap::new();
        for lemma in lemmas {
            let rule = extract_rule(form, lemma.as_ref())?;
            by_rule.insert(format_rule(&rule), lemma.as_ref().to_string());
        }
        Ok(Self::from_rule_map(token_index, form, by_rule))
    }

    fn from_rule_map(
        token_index: usize,
        form: &str,
        mut by_rule: BTreeMap<String, String>,
    ) -> Self {
        by_rule
            .entry(DO_NOTHING.to_string())
            .or_insert_with(|| fold_str(form));
        CandidateSet {
            token_index,
            candidates: by_rule
                .into_iter()
                .map(|(rule, lemma)| Candidate { rule, lemma })
                .collect(),
        }
    }

    pub fn rules(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.rule.as_str())
    }

    pub fn contains_rule(&self, rule: &str) -> bool {
        self.candidates
            .binary_search_by(|c| c.rule.as_str().cmp(rule))
            .is_ok()
    }

    pub fn lemma_of(&self, rule: &str) -> Option<&str> {
        self.candidates
            .binary_search_by(|c| c.rule.as_str().cmp(rule))
            .ok()
            .map(|i| self.candidates[i].lemma.as_str())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLattice {
    pub sentence: Sentence,
    pub sets: Vec<CandidateSet>,
}

impl CandidateLattice {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn form(&self, i: usize) -> &str {
        &self.sentence.tokens[i].form
    }
}

/// Corpus-derived candidate generator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryGenerator {
    /// lowercased form → observed lemmas
    pub form_map: BTreeMap<String, BTreeSet<String>>,
    /// lowercased form suffix → rule string → count
    pub suffix_map: BTreeMap<String, BTreeMap<String, u64>>,
}

impl DictionaryGenerator {
    pub fn build(train: &[Sentence]) -> Self {
        let mut gen = DictionaryGenerator::default();
        for token in train.iter().flat_map(|s| &s.tokens) {
            gen.add(token);
        }
        gen
    }

    fn add(&mut self, token: &Token) {
        let Some(lemma) = token.lemma.as_deref() else {
            return;
        };
        let Ok(rule) = extract_rule(&token.form, lemma) else {
            return;
        };
        let key = fold_str(&token.form);
        self.form_map
            .entry(key.clone())
            .or_default()
            .insert(lemma.to_string());
        let rule = format_rule(&rule);
        for suffix in suffixes(&key) {
            *self
                .suffix_map
                .entry(suffix.to_string())
                .or_default()
                .entry(rule.clone())
                .or_default() += 1;
        }
    }

    pub fn candidates_for(&self, token_index: usize, form: &str) -> CandidateSet {
        let key = fold_str(form);
        let mut by_rule = BTreeMap::new();
        if let Some(lemmas) = self.form_map.get(&key) {
            for lemma in lemmas {
                if let Ok(rule) = extract_rule(form, lemma) {
                    by_rule.insert(format_rule(&rule), lemma.clone());
                }
            }
        } else if let Some(rules) = suffixes(&key).find_map(|s| self.suffix_map.get(s)) {
            for rule in rules.keys() {
                if let Ok(lemma) = apply_rule_str(form, rule) {
                    by_rule.insert(rule.clone(), lemma);
                }
            }
        }
        CandidateSet::from_rule_map(token_index, form, by_rule)
    }

    pub fn generate(&self, sentence: &Sentence) -> CandidateLattice {
        let sets = sentence
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| self.candidates_for(i, &t.form))
            .collect();
        CandidateLattice {
            sentence: sentence.clone(),
            sets,
        }
    }
}

/// Suffixes of `s`, longest first, lengths `min(5, len)..=1`.
fn suffixes(s: &str) -> impl Iterator<Item = &str> {
    let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).collect();
    let n = bounds.len();
    (1..=MAX_SUFFIX_LEN.min(n))
        .rev()
        .map(move |len| &s[bounds[n - len]..])
}

pub fn build_dictionary_generator(train: &[Sentence]) -> DictionaryGenerator {
    DictionaryGenerator::build(train)
}

pub fn generate_candidates(gen: &DictionaryGenerator, sentence: &Sentence) -> CandidateLattice {
    gen.generate(sentence)
}

#[derive(Debug, Deserialize)]
struct ImportRecord {
    sentence_id: String,
    tokens: Vec<ImportToken>,
}

#[derive(Debug, Deserialize)]
struct ImportToken {
    form: String,
    #[serde(default)]
    lemmas: Vec<String>,
}

/// Read externally produced candidates (one sentence per JSONL line).
///
/// When a treebank is given, records are aligned with its sentences in order
/// and the treebank's gold lemmas are attached to the lattices.
pub fn import_candidates<R: BufRead>(
    reader: R,
    treebank: Option<&[Sentence]>,
) -> Result<Vec<CandidateLattice>> {
    let mut out = Vec::new();
    for rec in jsonl_records::<_, ImportRecord>(reader) {
        let (line, rec) = rec?;
        let idx = out.len();
        let sentence = match treebank {
            Some(tb) => {
                let gold = tb.get(idx).ok_or_else(|| {
                    Error::Alignment(format!(
                        "line {line}: more candidate records than treebank sentences"
                    ))
                })?;
                if gold.tokens.len() != rec.tokens.len() {
                    return Err(Error::Alignment(format!(
                        "line {line}: sentence {} has {} tokens, treebank has {}",
                        rec.sentence_id,
                        rec.tokens.len(),
                        gold.tokens.len()
                    )));
                }
                if let Some((a, b)) = gold
                    .tokens
                    .iter()
                    .zip(&rec.tokens)
                    .find(|(g, r)| g.form != r.form)
                {
                    return Err(Error::Alignment(format!(
                        "line {line}: form `{}` does not match treebank form `{}`",
                        b.form, a.form
                    )));
                }
                gold.clone()
            }
            None => Sentence {
                sentence_id: rec.sentence_id.clone(),
                tokens: rec
                    .tokens
                    .iter()
                    .map(|t| Token::new(t.form.clone(), None))
                    .collect(),
            },
        };
        let mut sets = Vec::with_capacity(rec.tokens.len());
        for (i, t) in rec.tokens.iter().enumerate() {
            if t.form.is_empty() {
                return Err(Error::parse(line, "empty form"));
            }
            let set = CandidateSet::from_lemmas(i, &t.form, &t.lemmas)
                .map_err(|e| Error::parse(line, e.to_string()))?;
            sets.push(set);
        }
        out.push(CandidateLattice { sentence, sets });
    }
    if let Some(tb) = treebank {
        if tb.len() != out.len() {
            return Err(Error::Alignment(format!(
                "{} candidate records for {} treebank sentences",
                out.len(),
                tb.len()
            )));
        }
    }
    Ok(out)
}

/// Share of gold-lemmatized tokens whose lemma is among the candidates.
pub fn oracle_accuracy(lattices: &[CandidateLattice], gold: &[Sentence]) -> Result<f64> {
    let (hit, total) = oracle_counts(lattices, gold)?;
    if total == 0 {
        return Err(Error::InvalidInput("no gold lemmas to evaluate".into()));
    }
    Ok(hit as f64 / total as f64)
}

pub(crate) fn oracle_counts(
    lattices: &[CandidateLattice],
    gold: &[Sentence],
) -> Result<(usize, usize)> {
    if lattices.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} lattices vs {} gold sentences",
            lattices.len(),
            gold.len()
        )));
    }
    let mut hit = 0;
    let mut total = 0;
    for (lat, sent) in lattices.iter().zip(gold) {
        if lat.sets.len() != sent.tokens.len() {
            return Err(Error::Alignment(format!(
                "sentence {}: {} candidate sets vs {} tokens",
                sent.sentence_id,
                lat.sets.len(),
                sent.tokens.len()
            )));
        }
        for (set, tok) in lat.sets.iter().zip(&sent.tokens) {
            if let Some(lemma) = &tok.lemma {
                total += 1;
                if set.candidates.iter().any(|c| &c.lemma == lemma) {
                    hit += 1;
                }
            }
        }
    }
    Ok((hit, total))
}

/// Checks that every candidate rule parses and reproduces its lemma.
pub fn validate_lattice(lattice: &CandidateLattice) -> Result<()> {
    for (set, tok) in lattice.sets.iter().zip(&lattice.sentence.tokens) {
        for c in &set.candidates {
            let rule = parse_rule(&c.rule)?;
            let lemma = apply_rule(&tok.form, &rule)?;
            if lemma != c.lemma {
                return Err(Error::InvalidInput(format!(
                    "candidate rule {} yields `{lemma}`, not `{}`",
                    c.rule, c.lemma
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(pairs: &[(&str, &str)]) -> Sentence {
        Sentence::from_pairs("s", pairs)
    }

    #[test]
    fn build_collects_lemmas() {
        let gen =
            DictionaryGenerator::build(&[sent(&[("teed", "tee")]), sent(&[("teed", "tegema")])]);
        let lemmas: Vec<_> = gen.form_map["teed"].iter().cloned().collect();
        assert_eq!(lemmas, ["tee", "tegema"]);

        assert_eq!(
            DictionaryGenerator::build(&[]),
            DictionaryGenerator::default()
        );

        let gen = DictionaryGenerator::build(&[sent(&[("Eesti", "Eesti")])]);
        assert!(gen.form_map["eesti"].contains("Eesti"));
        assert!(gen.suffix_map.contains_key("eesti"));
        assert!(gen.suffix_map.contains_key("i"));
    }

    #[test]
    fn known_ambiguous_form() {
        let gen =
            DictionaryGenerator::build(&[sent(&[("teed", "tee")]), sent(&[("teed", "tegema")])]);
        let set = gen.candidates_for(0, "teed");
        let lemmas: BTreeSet<_> = set.candidates.iter().map(|c| c.lemma.as_str()).collect();
        assert_eq!(lemmas, BTreeSet::from(["tee", "tegema", "teed"]));
        assert_eq!(set.lemma_of("U|P|S-"), Some("tee"));
        assert_eq!(set.lemma_of(DO_NOTHING), Some("teed"));
    }

    #[test]
    fn unknown_form_fallbacks() {
        let gen = DictionaryGenerator::build(&[sent(&[("sööb", "sööma")])]);
        let set = gen.candidates_for(0, "xyz");
        assert_eq!(
            set.candidates,
            vec![Candidate {
                rule: DO_NOTHING.into(),
                lemma: "xyz".into()
            }]
        );

        let set = gen.candidates_for(0, "laulab");
        assert_eq!(set.lemma_of("U|P|S-+m+a"), Some("laulama"));
        assert!(set.contains_rule(DO_NOTHING));
    }

    #[test]
    fn suffix_backoff_prefers_longest_match() {
        let gen = DictionaryGenerator::build(&[sent(&[("majadele", "maja"), ("koera", "koer")])]);
        // "ele" matches majadele's suffixes only
        let set = gen.candidates_for(0, "puudele");
        assert_eq!(set.lemma_of("U|P|S----"), Some("puu"));
        assert!(!set.contains_rule("U|P|S-"));
        // inapplicable rules are filtered: 4 deletions on a 3-letter form
        let set = gen.candidates_for(0, "ele");
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn import_examples() {
        let src = r#"{"sentence_id":"a","tokens":[{"form":"koera","lemmas":["koer"]},{"form":"ja","lemmas":[]}]}"#;
        let lats = import_candidates(src.as_bytes(), None).unwrap();
        assert_eq!(lats[0].sets[0].lemma_of("U|P|S-"), Some("koer"));
        assert_eq!(lats[0].sets[0].len(), 2);
        assert_eq!(lats[0].sets[1].len(), 1);
        validate_lattice(&lats[0]).unwrap();

        assert!(matches!(
            import_candidates("{\n".as_bytes(), None),
            Err(Error::Parse { line: 1, .. })
        ));

        let tb = vec![sent(&[("koera", "koer")])];
        assert!(matches!(
            import_candidates(src.as_bytes(), Some(&tb)),
            Err(Error::Alignment(_))
        ));
        let one = r#"{"sentence_id":"a","tokens":[{"form":"koera","lemmas":["koer"]}]}"#;
        let lats = import_candidates(one.as_bytes(), Some(&tb)).unwrap();
        assert_eq!(lats[0].sentence.tokens[0].lemma.as_deref(), Some("koer"));
        assert_eq!(oracle_accuracy(&lats, &tb).unwrap(), 1.0);
    }

    #[test]
    fn oracle_examples() {
        let gold = vec![sent(&[("ja", "ja"), ("ka", "ka")])];
        let gen = DictionaryGenerator::default();
        let lats: Vec<_> = gold.iter().map(|s| gen.generate(s)).collect();
        assert_eq!(oracle_accuracy(&lats, &gold).unwrap(), 1.0);

        let gold = vec![sent(&[("ja", "ja"), ("koera", "koer")])];
        let lats: Vec<_> = gold.iter().map(|s| gen.generate(s)).collect();
        assert_eq!(oracle_accuracy(&lats, &gold).unwrap(), 0.5);

        assert!(matches!(
            oracle_accuracy(&lats, &[]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn training_recall_is_complete() {
        let train = vec![
            sent(&[
                ("Koerad", "koer"),
                ("jooksid", "jooksma"),
                ("Tallinnas", "Tallinn"),
            ]),
            sent(&[("teed", "tee"), ("teed", "tegema"), ("ja", "ja")]),
        ];
        let gen = DictionaryGenerator::build(&train);
        let lats: Vec<_> = train.iter().map(|s| gen.generate(s)).collect();
        assert_eq!(oracle_accuracy(&lats, &train).unwrap(), 1.0);
        for l in &lats {
            validate_lattice(l).unwrap();
        }
    }
}
