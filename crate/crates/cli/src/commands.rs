use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use rayon::prelude::*;

use lemir_core::candidates::import_candidates;
use lemir_core::corpus_io::{
    load_jsonl_corpus, load_qrels, load_queries, load_run, parse_conllu, write_run,
};
use lemir_core::disambig::{
    DisambiguatorModel, Oracle, ReferenceScorer, ScorerFailurePolicy, SpanMatcher,
    SpanMatcherConfig,
};
use lemir_core::editscript::{extract_rule, parse_rule, rule_frequency_table, verbalize_rule};
use lemir_core::ireval::{evaluate, format_metrics_table};
use lemir_core::lemeval::{
    bootstrap_ci, evaluate_sentences, format_report_table, lemmatize_text, BootstrapConfig,
};
use lemir_core::model::ModelBundle;
use lemir_core::retrieval::{build_index, search, SuffixStemmer};
use lemir_core::scorer_bridge::{check_conformance, serve, ScorerClient};
use lemir_core::{
    apply_rule, format_rule, Bm25Params, CandidateLattice, Disambiguator, NormalizationPipeline,
    RetrievalIndex, RunList, Sentence, SpanScorer,
};

use crate::args::*;
use crate::{EXIT_DATA, EXIT_SCORER, EXIT_USAGE};

/// Semantically invalid flag combination, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Scorer misbehaviour found outside a library call, reported with exit
/// code 3.
#[derive(Debug)]
pub struct ScorerFailure(pub String);

impl fmt::Display for ScorerFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ScorerFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<ScorerFailure>() || cause.is::<lemir_core::scorer_bridge::ScorerError>() {
            return EXIT_SCORER;
        }
        if let Some(lemir_core::Error::Scorer { .. }) = cause.downcast_ref::<lemir_core::Error>() {
            return EXIT_SCORER;
        }
    }
    EXIT_DATA
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Rules(RulesCommand::Stats { input, tsv, top }) => {
            rules_stats(&input, tsv.as_deref(), top)
        }
        Command::Rules(RulesCommand::Roundtrip { input }) => rules_roundtrip(&input),
        Command::Train(cmd) => train(cmd),
        Command::Lemmatize(args) => lemmatize(args),
        Command::EvalLemma(args) => eval_lemma(args),
        Command::Index(IndexCommand::Build {
            docs,
            output,
            k1,
            b,
            pipeline,
        }) => index_build(&docs, &output, Bm25Params { k1, b }, &pipeline),
        Command::Search(args) => run_search(args),
        Command::EvalIr(args) => eval_ir(args),
        Command::Scorer(cmd) => scorer(cmd),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// File when given, standard output otherwise.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) if p != Path::new("-") => Box::new(create(p)?),
        _ => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_conllu(path: &Path) -> Result<Vec<Sentence>> {
    parse_conllu(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_model(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(open(path)?).with_context(|| format!("reading model {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn rules_stats(input: &Path, tsv: Option<&Path>, top: usize) -> Result<()> {
    let sentences = read_conllu(input)?;
    let pairs = sentences
        .iter()
        .flat_map(|s| &s.tokens)
        .filter_map(|t| t.lemma.as_deref().map(|l| (t.form.as_str(), l)));
    let table = rule_frequency_table(pairs)?;
    if let Some(path) = tsv {
        let mut out = create(path)?;
        table.write_tsv(&mut out)?;
        out.flush()?;
    }
    let mut out = output(None)?;
    writeln!(
        out,
        "{:>6}  {:>9}  {:<20}  Description",
        "Share", "Count", "Rule"
    )?;
    let shown = if top == 0 {
        table.entries.len()
    } else {
        top.min(table.entries.len())
    };
    for e in &table.entries[..shown] {
        let description = parse_rule(&e.rule).map(|r| verbalize_rule(&r))?;
        writeln!(
            out,
            "{:>6.1}  {:>9}  {:<20}  {}",
            e.share * 100.0,
            e.count,
            e.rule,
            description
        )?;
    }
    writeln!(
        out,
        "{} tokens, {} distinct rules",
        table.total,
        table.entries.len()
    )?;
    out.flush()?;
    Ok(())
}

fn rules_roundtrip(input: &Path) -> Result<()> {
    let sentences = read_conllu(input)?;
    let pairs: Vec<(&str, &str)> = sentences
        .iter()
        .flat_map(|s| &s.tokens)
        .filter_map(|t| t.lemma.as_deref().map(|l| (t.form.as_str(), l)))
        .collect();
    let failures: Vec<String> = pairs
        .par_iter()
        .filter_map(|&(form, lemma)| {
            let check = || -> std::result::Result<bool, lemir_core::RuleError> {
                let rule = extract_rule(form, lemma)?;
                Ok(apply_rule(form, &rule)? == lemma && parse_rule(&format_rule(&rule))? == rule)
            };
            match check() {
                Ok(true) => None,
                Ok(false) => Some(format!("{form}\t{lemma}\tmismatch")),
                Err(e) => Some(format!("{form}\t{lemma}\t{e}")),
            }
        })
        .collect();
    println!("{} pairs, {} failures", pairs.len(), failures.len());
    if failures.is_empty() {
        return Ok(());
    }
    for f in failures.iter().take(20) {
        eprintln!("{f}");
    }
    anyhow::bail!(
        "{} of {} pairs do not round-trip",
        failures.len(),
        pairs.len()
    )
}

fn train(cmd: TrainCommand) -> Result<()> {
    let (input, output, bundle) = match cmd {
        TrainCommand::Freq { input, output } => {
            let train = read_conllu(&input)?;
            (input, output, ModelBundle::train_frequency(&train))
        }
        TrainCommand::Hmm {
            input,
            output,
            alpha,
            beta,
        } => {
            let train = read_conllu(&input)?;
            (input, output, ModelBundle::train_hmm(&train, alpha, beta)?)
        }
    };
    let mut out = create(&output)?;
    bundle.save(&mut out)?;
    out.flush()?;
    eprintln!(
        "trained {} from {}: {} forms, {} suffixes",
        bundle.disambiguator.as_disambiguator().name(),
        input.display(),
        bundle.generator.form_map.len(),
        bundle.generator.suffix_map.len()
    );
    Ok(())
}

fn matcher_config(args: &ScorerArgs) -> SpanMatcherConfig {
    SpanMatcherConfig {
        threshold: args.threshold,
        on_scorer_error: match args.on_scorer_error {
            OnScorerError::Fail => ScorerFailurePolicy::Fail,
            OnScorerError::DoNothing => ScorerFailurePolicy::DoNothing,
        },
        ..SpanMatcherConfig::default()
    }
}

/// Connect to the external scorer, if one is configured.
fn external_scorer(args: &ScorerArgs) -> Result<Option<ScorerClient>> {
    let timeout = Duration::from_secs_f64(args.scorer_timeout);
    let client = if let Some(cmd) = &args.scorer_cmd {
        ScorerClient::spawn(cmd, &args.scorer_args, timeout)
            .map_err(lemir_core::Error::from)
            .with_context(|| format!("starting scorer `{cmd}`"))?
    } else if let Some(addr) = &args.scorer_tcp {
        ScorerClient::connect_tcp(addr.as_str(), timeout)
            .map_err(lemir_core::Error::from)
            .with_context(|| format!("connecting to scorer at {addr}"))?
    } else {
        return Ok(None);
    };
    Ok(Some(client))
}

fn span_matcher(args: &ScorerArgs) -> Result<Arc<dyn Disambiguator>> {
    let config = matcher_config(args);
    config.validate()?;
    let scorer: Arc<dyn SpanScorer> = match external_scorer(args)? {
        Some(client) => Arc::new(client),
        None => Arc::new(ReferenceScorer::from_config(&config)),
    };
    Ok(Arc::new(SpanMatcher::new(scorer, config)))
}

fn model_disambiguator(model: DisambiguatorModel) -> Arc<dyn Disambiguator> {
    match model {
        DisambiguatorModel::Frequency(m) => Arc::new(m),
        DisambiguatorModel::Hmm(m) => Arc::new(m),
    }
}

fn decoder(
    bundle: ModelBundle,
    decoder: Decoder,
    scorer: &ScorerArgs,
) -> Result<(ModelBundle, Arc<dyn Disambiguator>)> {
    let d = match decoder {
        Decoder::Model => model_disambiguator(bundle.disambiguator.clone()),
        Decoder::Span => span_matcher(scorer)?,
    };
    Ok((bundle, d))
}

fn lemmatize(args: LemmatizeArgs) -> Result<()> {
    let (bundle, disambiguator) = decoder(read_model(&args.model)?, args.decoder, &args.scorer)?;
    let mut text = String::new();
    match &args.input {
        Some(p) => open(p)?.read_to_string(&mut text)?,
        None => io::stdin().lock().read_to_string(&mut text)?,
    };
    let lines: Vec<&str> = text.lines().collect();
    let results = lines
        .par_iter()
        .map(|line| lemmatize_text(line, &bundle.generator, disambiguator.as_ref()))
        .collect::<lemir_core::Result<Vec<_>>>()?;
    let mut out = output(args.output.as_deref())?;
    for sentence in results {
        for (form, lemma) in sentence {
            writeln!(out, "{form}\t{lemma}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Oracle => "oracle",
        Method::Freq => "freq",
        Method::Hmm => "hmm",
        Method::Span => "span",
    }
}

fn eval_lemma(args: EvalLemmaArgs) -> Result<()> {
    let test = read_conllu(&args.input)?;
    let bundles = args
        .models
        .iter()
        .map(|p| read_model(p))
        .collect::<Result<Vec<_>>>()?;
    let lattices: Vec<CandidateLattice> = match (&args.candidates, bundles.first()) {
        (Some(path), _) => import_candidates(open(path)?, Some(&test))
            .with_context(|| format!("reading candidates {}", path.display()))?,
        (None, Some(bundle)) => test.iter().map(|s| bundle.generator.generate(s)).collect(),
        (None, None) => return Err(usage("eval-lemma needs --model or --candidates")),
    };

    let find_kind = |want: Method| -> Result<Arc<dyn Disambiguator>> {
        bundles
            .iter()
            .find(|b| {
                matches!(
                    (&b.disambiguator, want),
                    (DisambiguatorModel::Frequency(_), Method::Freq)
                        | (DisambiguatorModel::Hmm(_), Method::Hmm)
                )
            })
            .map(|b| model_disambiguator(b.disambiguator.clone()))
            .ok_or_else(|| {
                usage(format!(
                    "method `{}` needs a --model of that kind",
                    method_name(want)
                ))
            })
    };

    let config = BootstrapConfig {
        replicates: args.bootstrap as usize,
        level: args.level,
        seed: args.seed,
    };
    let mut reports = Vec::new();
    for &method in &args.methods {
        let disambiguator: Arc<dyn Disambiguator> = match method {
            Method::Oracle => Arc::new(Oracle),
            Method::Freq | Method::Hmm => find_kind(method)?,
            Method::Span => span_matcher(&args.scorer)?,
        };
        let stats = evaluate_sentences(&lattices, disambiguator.as_ref())
            .with_context(|| format!("evaluating {}", method_name(method)))?;
        reports.push(bootstrap_ci(method_name(method), &stats, &config)?);
    }

    if let Some(path) = &args.json {
        write_json(path, &reports)?;
    }
    let mut out = output(None)?;
    out.write_all(format_report_table(&reports).as_bytes())?;
    out.flush()?;
    Ok(())
}

fn pipeline(args: &PipelineArgs) -> Result<NormalizationPipeline> {
    Ok(match args.pipeline {
        PipelineKind::Identity => NormalizationPipeline::Identity,
        PipelineKind::Stemmer => {
            let stemmer = match &args.suffixes {
                Some(path) => {
                    let suffixes: Vec<String> = open(path)?
                        .lines()
                        .map(|l| l.map(|s| s.trim().to_string()))
                        .filter(|l| {
                            l.as_ref()
                                .map_or(true, |s| !s.is_empty() && !s.starts_with('#'))
                        })
                        .collect::<io::Result<_>>()?;
                    SuffixStemmer::new(&suffixes, args.min_stem)
                }
                None => SuffixStemmer::new(
                    lemir_core::retrieval::DEFAULT_ESTONIAN_SUFFIXES,
                    args.min_stem,
                ),
            };
            NormalizationPipeline::Stemmer(stemmer)
        }
        PipelineKind::Lemmatizer => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| usage("the lemmatizer pipeline needs --model"))?;
            let (bundle, disambiguator) = decoder(read_model(path)?, args.decoder, &args.scorer)?;
            NormalizationPipeline::Lemmatizer {
                generator: Arc::new(bundle.generator),
                disambiguator,
            }
        }
    })
}

fn index_build(docs: &Path, output: &Path, params: Bm25Params, args: &PipelineArgs) -> Result<()> {
    let pipeline = pipeline(args)?;
    let documents =
        load_jsonl_corpus(open(docs)?).with_context(|| format!("reading {}", docs.display()))?;
    let index = build_index(&documents, &pipeline, params)?;
    let mut out = create(output)?;
    index.save(&mut out)?;
    out.flush()?;
    eprintln!(
        "indexed {} documents, {} terms ({})",
        index.doc_count(),
        index.postings.len(),
        index.pipeline
    );
    Ok(())
}

fn run_search(args: SearchArgs) -> Result<()> {
    let mut index = RetrievalIndex::load(open(&args.index)?)
        .with_context(|| format!("reading index {}", args.index.display()))?;
    let pipeline = pipeline(&args.pipeline)?;
    if pipeline.name() != index.pipeline {
        return Err(usage(format!(
            "index was built with pipeline `{}` but queries would use `{}`",
            index.pipeline,
            pipeline.name()
        )));
    }
    if let Some(k1) = args.k1 {
        index.params.k1 = k1;
    }
    if let Some(b) = args.b {
        index.params.b = b;
    }
    index.params.validate()?;
    let queries = load_queries(open(&args.queries)?)
        .with_context(|| format!("reading {}", args.queries.display()))?;
    let k = args.top_k as usize;
    let results = queries
        .par_iter()
        .map(|q| {
            Ok((
                q.query_id.clone(),
                search(&index, &pipeline.normalize(&q.text)?, k),
            ))
        })
        .collect::<lemir_core::Result<Vec<_>>>()?;
    let mut run = RunList::default();
    for (qid, ranking) in results {
        if run.results.insert(qid.clone(), ranking).is_some() {
            return Err(lemir_core::Error::DuplicateId(qid).into());
        }
    }
    let tag = args
        .tag
        .unwrap_or_else(|| index.pipeline.replace(char::is_whitespace, "_"));
    let mut out = output(args.output.as_deref())?;
    write_run(&run, &tag, &mut out)?;
    out.flush()?;
    Ok(())
}

fn eval_ir(args: EvalIrArgs) -> Result<()> {
    if args.ks.iter().any(|&k| k == 0) {
        return Err(usage("cutoffs must be >= 1"));
    }
    let qrels = load_qrels(open(&args.qrels)?)
        .with_context(|| format!("reading {}", args.qrels.display()))?;
    let reports = args
        .runs
        .iter()
        .map(|(name, path)| {
            let run =
                load_run(open(path)?).with_context(|| format!("reading run {}", path.display()))?;
            Ok(evaluate(name, &run, &qrels, &args.ks))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &args.json {
        write_json(path, &reports)?;
    }
    let mut out = output(None)?;
    out.write_all(format_metrics_table(&reports, &args.ks).as_bytes())?;
    out.flush()?;
    Ok(())
}

fn scorer(cmd: ScorerCommand) -> Result<()> {
    match cmd {
        ScorerCommand::ServeReference { dim, window, scale } => {
            if dim == 0 || !scale.is_finite() {
                return Err(usage("--dim must be >= 1 and --scale finite"));
            }
            let scorer = ReferenceScorer { dim, window, scale };
            serve(io::stdin().lock(), io::stdout().lock(), &scorer)
                .map_err(lemir_core::Error::from)?;
            Ok(())
        }
        ScorerCommand::Check { scorer, fuzz, seed } => {
            let client = external_scorer(&scorer)?
                .ok_or_else(|| usage("scorer check needs --scorer-cmd or --scorer-tcp"))?;
            let report = check_conformance(&client, fuzz, seed);
            println!(
                "golden requests: {}, fuzz requests: {}, violations: {}",
                report.golden_cases,
                report.fuzz_cases,
                report.violations.len()
            );
            for v in report.violations.iter().take(20) {
                eprintln!("{v}");
            }
            if report.passed() {
                Ok(())
            } else {
                Err(ScorerFailure(format!(
                    "{} conformance violations",
                    report.violations.len()
                ))
                .into())
            }
        }
    }
}
