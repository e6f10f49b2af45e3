use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "lemir",
    version,
    about = "Lemma disambiguation and BM25 retrieval evaluation"
)]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism. Results do not
    /// depend on this value.
    #[arg(long, global = true, env = "LEMIR_JOBS", value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transformation-rule utilities.
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Train a candidate generator and disambiguator from CoNLL-U.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Lemmatize plain text, one `form<TAB>lemma` line per token.
    Lemmatize(LemmatizeArgs),
    /// Lemmatization accuracy with bootstrap confidence intervals.
    EvalLemma(EvalLemmaArgs),
    /// Retrieval index management.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run queries against an index and write a TREC run.
    Search(SearchArgs),
    /// Recall@k, MAP@k and Success@k for one or more runs.
    EvalIr(EvalIrArgs),
    /// External scorer protocol tools.
    #[command(subcommand)]
    Scorer(ScorerCommand),
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Rule frequency table over a CoNLL-U file.
    Stats {
        #[arg(long, short)]
        input: PathBuf,
        /// Also write `rule<TAB>count<TAB>share` lines here.
        #[arg(long)]
        tsv: Option<PathBuf>,
        /// Rows to print; 0 prints all.
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
    /// Check apply(extract(form, lemma)) = lemma and parse(format(rule)) = rule
    /// on every token.
    Roundtrip {
        #[arg(long, short)]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Most frequent rule per form, with suffix and global back-off.
    Freq {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// First-order HMM over rules.
    Hmm {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Transition smoothing.
        #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
        alpha: f64,
        /// Emission smoothing.
        #[arg(long, default_value_t = 0.01, value_parser = positive_f64)]
        beta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Decoder {
    /// The disambiguator stored in the model.
    Model,
    /// Span/label matching with the configured scorer.
    Span,
}

#[derive(Debug, Args)]
pub struct LemmatizeArgs {
    #[arg(long, short, env = "LEMIR_MODEL")]
    pub model: PathBuf,
    /// Text file; reads standard input when absent. Each line is one
    /// sentence.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Decoder::Model)]
    pub decoder: Decoder,
    #[command(flatten)]
    pub scorer: ScorerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Oracle,
    Freq,
    Hmm,
    Span,
}

#[derive(Debug, Args)]
pub struct EvalLemmaArgs {
    /// Gold CoNLL-U test file.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Model bundles; `freq` and `hmm` use the bundle of that kind, the
    /// first bundle supplies candidates.
    #[arg(long = "model", short, env = "LEMIR_MODEL", value_delimiter = ',')]
    pub models: Vec<PathBuf>,
    /// Externally generated candidates (JSONL), aligned to the test file.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "oracle,freq,hmm"
    )]
    pub methods: Vec<Method>,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 1000, env = "LEMIR_BOOTSTRAP", value_parser = clap::value_parser!(u64).range(1..))]
    pub bootstrap: u64,
    #[arg(long, default_value_t = 0.95, value_parser = open_unit)]
    pub level: f64,
    #[arg(long, default_value_t = 42, env = "LEMIR_SEED")]
    pub seed: u64,
    /// Write the JSON report here; the table goes to standard output.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub scorer: ScorerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineKind {
    Identity,
    Stemmer,
    Lemmatizer,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long, value_enum, env = "LEMIR_PIPELINE", default_value_t = PipelineKind::Identity)]
    pub pipeline: PipelineKind,
    /// Model bundle for the lemmatizer pipeline.
    #[arg(long, short, env = "LEMIR_MODEL")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Decoder::Model)]
    pub decoder: Decoder,
    /// Stemmer suffix list, one per line; defaults to a built-in Estonian
    /// case-ending list.
    #[arg(long)]
    pub suffixes: Option<PathBuf>,
    /// Shortest stem the stemmer may leave.
    #[arg(long, default_value_t = 3)]
    pub min_stem: usize,
    #[command(flatten)]
    pub scorer: ScorerArgs,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Normalize and index a JSONL document collection.
    Build {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.5, env = "LEMIR_K1", value_parser = positive_f64)]
        k1: f64,
        #[arg(long, default_value_t = 0.75, env = "LEMIR_B", value_parser = unit_f64)]
        b: f64,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// JSONL queries `{"query_id": ..., "text": ...}`.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 100, env = "LEMIR_TOP_K", value_parser = clap::value_parser!(u64).range(1..))]
    pub top_k: u64,
    /// Override the k1 stored in the index.
    #[arg(long, env = "LEMIR_K1", value_parser = positive_f64)]
    pub k1: Option<f64>,
    /// Override the b stored in the index.
    #[arg(long, env = "LEMIR_B", value_parser = unit_f64)]
    pub b: Option<f64>,
    /// Run tag; defaults to the pipeline name.
    #[arg(long)]
    pub tag: Option<String>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EvalIrArgs {
    #[arg(long)]
    pub qrels: PathBuf,
    /// `name=path` pairs, evaluated and printed in the given order.
    #[arg(long = "run", required = true, value_parser = named_path)]
    pub runs: Vec<(String, PathBuf)>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,100")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ScorerCommand {
    /// Serve the built-in hashing scorer over standard input and output.
    ServeReference {
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        window: usize,
        #[arg(long, default_value_t = 5.0)]
        scale: f64,
    },
    /// Run the golden and randomized conformance checks against a scorer.
    Check {
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Randomized requests after the golden ones.
        #[arg(long, default_value_t = 1000)]
        fuzz: usize,
        #[arg(long, default_value_t = 42, env = "LEMIR_SEED")]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnScorerError {
    Fail,
    DoNothing,
}

#[derive(Debug, Clone, Args)]
pub struct ScorerArgs {
    /// External scorer program, spawned with the protocol on its stdio.
    #[arg(long, env = "LEMIR_SCORER_CMD", conflicts_with = "scorer_tcp")]
    pub scorer_cmd: Option<String>,
    /// Arguments for --scorer-cmd; repeat for several.
    #[arg(long = "scorer-arg", allow_hyphen_values = true)]
    pub scorer_args: Vec<String>,
    /// `host:port` of a scorer speaking the protocol over TCP.
    #[arg(long, env = "LEMIR_SCORER_TCP")]
    pub scorer_tcp: Option<String>,
    /// Seconds to wait for each scorer response.
    #[arg(long, default_value_t = 30.0, value_parser = positive_f64)]
    pub scorer_timeout: f64,
    /// Minimum score for a label to beat the do-nothing class.
    #[arg(long, default_value_t = 0.5, env = "LEMIR_THRESHOLD", value_parser = unit_f64)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = OnScorerError::Fail)]
    pub on_scorer_error: OnScorerError,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !v.is_finite() {
        return Err(format!("`{s}` is not finite"));
    }
    Ok(v)
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v <= 0.0 {
        return Err(format!("{v} must be > 0"));
    }
    Ok(v)
}

fn unit_f64(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} must lie in [0, 1]"));
    }
    Ok(v)
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if !(v > 0.0 && v < 1.0) {
        return Err(format!("{v} must lie in (0, 1)"));
    }
    Ok(v)
}

fn named_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}
