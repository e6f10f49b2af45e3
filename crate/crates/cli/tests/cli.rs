use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_lemir");

const TRAIN: &str = "\
# sent_id = s1
1\tKoera\tkoer\t_\t_\t_\t_\t_\t_\t_
2\tteed\ttee\t_\t_\t_\t_\t_\t_\t_
3\t.\t.\t_\t_\t_\t_\t_\t_\t_

# sent_id = s2
1\tTa\ttema\t_\t_\t_\t_\t_\t_\t_
2\tsööb\tsööma\t_\t_\t_\t_\t_\t_\t_
3\tteed\ttegema\t_\t_\t_\t_\t_\t_\t_

# sent_id = s3
1\tmetsa\tmets\t_\t_\t_\t_\t_\t_\t_
2\tja\tja\t_\t_\t_\t_\t_\t_\t_
3\tkoera\tkoer\t_\t_\t_\t_\t_\t_\t_

";

fn lemir(args: &[&str]) -> Output {
    lemir_env(args, &[])
}

fn lemir_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    // keep the caller's environment from leaking into flag defaults
    for var in [
        "LEMIR_JOBS",
        "LEMIR_K1",
        "LEMIR_B",
        "LEMIR_TOP_K",
        "LEMIR_MODEL",
        "LEMIR_PIPELINE",
        "LEMIR_SEED",
    ] {
        if !env.iter().any(|(k, _)| *k == var) {
            cmd.env_remove(var);
        }
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> String {
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.conllu"), TRAIN).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, content: &str) -> String {
        fs::write(self.path(name), content).unwrap();
        self.p(name)
    }

    /// 150 documents that all contain "koer", plus two queries.
    fn retrieval_corpus(&self) {
        let mut docs = String::new();
        for i in 0..150 {
            docs.push_str(&format!(
                "{{\"doc_id\":\"d{i:03}\",\"title\":\"t{i}\",\"text\":\"koer {} mets\"}}\n",
                "ja ".repeat(i % 7)
            ));
        }
        self.write("docs.jsonl", &docs);
        self.write(
            "queries.jsonl",
            "{\"query_id\":\"q1\",\"text\":\"koer\"}\n{\"query_id\":\"q2\",\"text\":\"mets ja\"}\n",
        );
        let mut qrels = String::new();
        for i in (0..150).step_by(10) {
            qrels.push_str(&format!("q1 0 d{i:03} 1\nq2 0 d{:03} 2\n", i + 1));
        }
        qrels.push_str("q1 0 d149 0\n");
        self.write("qrels.txt", &qrels);
    }
}

fn lines_per_query(run: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for line in run.lines() {
        *counts
            .entry(line.split(' ').next().unwrap().to_string())
            .or_default() += 1;
    }
    counts
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&lemir(&["--help"])), 0);
    assert_eq!(code(&lemir(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let f = Fixture::new();
    let train = f.p("train.conllu");
    assert_eq!(code(&lemir(&[])), 1);
    assert_eq!(code(&lemir(&["no-such-command"])), 1);
    assert_eq!(
        code(&lemir(&[
            "index", "build", "--docs", "x", "-o", "y", "--k1", "0"
        ])),
        1
    );
    assert_eq!(
        code(&lemir(&[
            "index", "build", "--docs", "x", "-o", "y", "--b", "1.5"
        ])),
        1
    );
    assert_eq!(
        code(&lemir(&["eval-lemma", "-i", &train, "--bootstrap", "0"])),
        1
    );
    assert_eq!(
        code(&lemir(&["lemmatize", "-m", "m", "--threshold", "2"])),
        1
    );
    // semantic: the lemmatizer pipeline without a model
    assert_eq!(
        code(&lemir(&[
            "index",
            "build",
            "--docs",
            &train,
            "-o",
            "y",
            "--pipeline",
            "lemmatizer"
        ])),
        1
    );
    assert_eq!(code(&lemir(&["eval-lemma", "-i", &train])), 1);
}

#[test]
fn data_errors_exit_two() {
    let f = Fixture::new();
    assert_eq!(
        code(&lemir(&["rules", "stats", "-i", &f.p("missing.conllu")])),
        2
    );
    let bad = f.write("bad.conllu", "1\tonly-two\n\n");
    assert_eq!(
        code(&lemir(&["train", "freq", "-i", &bad, "-o", &f.p("m.json")])),
        2
    );
    let qrels = f.write("qrels.txt", "q1 0 d1 7\n");
    let run = f.write("a.run", "q1 Q0 d1 1 1.0 x\n");
    let out = lemir(&["eval-ir", "--qrels", &qrels, "--run", &format!("a={run}")]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn scorer_errors_exit_three() {
    let f = Fixture::new();
    let model = f.p("m.json");
    ok(lemir(&[
        "train",
        "freq",
        "-i",
        &f.p("train.conllu"),
        "-o",
        &model,
    ]));
    let text = f.write("in.txt", "Koera teed\n");
    let out = lemir(&[
        "lemmatize",
        "-m",
        &model,
        "-i",
        &text,
        "--decoder",
        "span",
        "--scorer-cmd",
        "false",
    ]);
    assert_eq!(
        code(&out),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        code(&lemir(&[
            "scorer",
            "check",
            "--scorer-cmd",
            "cat",
            "--fuzz",
            "3"
        ])),
        3
    );
}

#[test]
fn rules_subcommands() {
    let f = Fixture::new();
    let tsv = f.p("rules.tsv");
    let table = ok(lemir(&[
        "rules",
        "stats",
        "-i",
        &f.p("train.conllu"),
        "--tsv",
        &tsv,
        "--top",
        "0",
    ]));
    assert!(table.starts_with(" Share      Count  Rule"));
    assert!(table.contains("U|P|S-  "));
    assert!(table.ends_with("9 tokens, 5 distinct rules\n"));
    let tsv = fs::read_to_string(tsv).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "U|P|S-\t4\t0.444444");
    assert_eq!(
        ok(lemir(&["rules", "roundtrip", "-i", &f.p("train.conllu")])),
        "9 pairs, 0 failures\n"
    );
}

#[test]
fn train_and_lemmatize() {
    let f = Fixture::new();
    let model = f.p("hmm.json");
    ok(lemir(&[
        "train",
        "hmm",
        "-i",
        &f.p("train.conllu"),
        "-o",
        &model,
        "--alpha",
        "0.1",
        "--beta",
        "0.01",
    ]));
    let text = f.write("in.txt", "Koera teed .\nmetsa\n");
    let out = ok(lemir(&["lemmatize", "-m", &model, "-i", &text]));
    assert_eq!(out, "Koera\tkoer\nteed\ttee\n.\t.\n\nmetsa\tmets\n\n");
}

#[test]
fn eval_lemma_is_deterministic_across_jobs() {
    let f = Fixture::new();
    let (freq, hmm) = (f.p("freq.json"), f.p("hmm.json"));
    ok(lemir(&[
        "train",
        "freq",
        "-i",
        &f.p("train.conllu"),
        "-o",
        &freq,
    ]));
    ok(lemir(&[
        "train",
        "hmm",
        "-i",
        &f.p("train.conllu"),
        "-o",
        &hmm,
    ]));
    let models = format!("{freq},{hmm}");
    let mut outputs = Vec::new();
    for jobs in ["1", "4"] {
        let json = f.p(&format!("report{jobs}.json"));
        let table = ok(lemir(&[
            "--jobs",
            jobs,
            "eval-lemma",
            "-i",
            &f.p("train.conllu"),
            "--model",
            &models,
            "--methods",
            "oracle,freq,hmm,span",
            "--bootstrap",
            "300",
            "--json",
            &json,
        ]));
        outputs.push((table, fs::read(json).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0]
        .0
        .starts_with("Method  Accuracy [95% CI]\noracle  1.000"));
}

#[test]
fn eval_lemma_with_imported_candidates() {
    let f = Fixture::new();
    let candidates = f.write(
        "cands.jsonl",
        concat!(
            r#"{"sentence_id":"s1","tokens":[{"form":"Koera","lemmas":["koer"]},{"form":"teed","lemmas":["tee","tegema"]},{"form":".","lemmas":[]}]}"#, "\n",
            r#"{"sentence_id":"s2","tokens":[{"form":"Ta","lemmas":["tema"]},{"form":"sööb","lemmas":["sööma"]},{"form":"teed","lemmas":["tee"]}]}"#, "\n",
            r#"{"sentence_id":"s3","tokens":[{"form":"metsa","lemmas":["mets"]},{"form":"ja","lemmas":[]},{"form":"koera","lemmas":["koer"]}]}"#, "\n",
        ),
    );
    let out = ok(lemir(&[
        "eval-lemma",
        "-i",
        &f.p("train.conllu"),
        "--candidates",
        &candidates,
        "--methods",
        "oracle",
        "--bootstrap",
        "10",
    ]));
    // "teed" → "tegema" is missing from s2's candidates: 8 of 9
    assert!(out.contains("oracle  0.889"), "{out}");
    let short = f.write("short.jsonl", r#"{"sentence_id":"s1","tokens":[]}"#);
    assert_eq!(
        code(&lemir(&[
            "eval-lemma",
            "-i",
            &f.p("train.conllu"),
            "--candidates",
            &short,
            "--methods",
            "oracle"
        ])),
        2
    );
}

#[test]
fn search_respects_top_k_and_env_fallback() {
    let f = Fixture::new();
    f.retrieval_corpus();
    let index = f.p("identity.idx");
    ok(lemir(&[
        "index",
        "build",
        "--docs",
        &f.p("docs.jsonl"),
        "-o",
        &index,
        "--pipeline",
        "identity",
    ]));
    let run = ok(lemir(&[
        "search",
        "--index",
        &index,
        "--queries",
        &f.p("queries.jsonl"),
        "--top-k",
        "100",
    ]));
    let counts = lines_per_query(&run);
    assert_eq!(counts.len(), 2);
    assert!(counts.values().all(|&n| n <= 100), "{counts:?}");
    assert_eq!(counts["q1"], 100);

    let run = ok(lemir_env(
        &[
            "search",
            "--index",
            &index,
            "--queries",
            &f.p("queries.jsonl"),
        ],
        &[("LEMIR_TOP_K", "3")],
    ));
    assert!(lines_per_query(&run).values().all(|&n| n == 3));
    // flags beat the environment
    let run = ok(lemir_env(
        &[
            "search",
            "--index",
            &index,
            "--queries",
            &f.p("queries.jsonl"),
            "--top-k",
            "2",
        ],
        &[("LEMIR_TOP_K", "3")],
    ));
    assert!(lines_per_query(&run).values().all(|&n| n == 2));
    assert_eq!(
        code(&lemir_env(
            &[
                "search",
                "--index",
                &index,
                "--queries",
                &f.p("queries.jsonl")
            ],
            &[("LEMIR_K1", "-1")]
        )),
        1
    );
}

#[test]
fn search_rejects_mismatched_pipeline() {
    let f = Fixture::new();
    f.retrieval_corpus();
    let index = f.p("stem.idx");
    ok(lemir(&[
        "index",
        "build",
        "--docs",
        &f.p("docs.jsonl"),
        "-o",
        &index,
        "--pipeline",
        "stemmer",
    ]));
    let out = lemir(&[
        "search",
        "--index",
        &index,
        "--queries",
        &f.p("queries.jsonl"),
        "--pipeline",
        "identity",
    ]);
    assert_eq!(code(&out), 1);
    ok(lemir(&[
        "search",
        "--index",
        &index,
        "--queries",
        &f.p("queries.jsonl"),
        "--pipeline",
        "stemmer",
    ]));
}

fn full_ir_pipeline(f: &Fixture, jobs: &str) -> (String, Vec<u8>, String) {
    let model = f.p("freq.json");
    ok(lemir(&[
        "train",
        "freq",
        "-i",
        &f.p("train.conllu"),
        "-o",
        &model,
    ]));
    let mut runs = Vec::new();
    for pipeline in ["identity", "stemmer", "lemmatizer"] {
        let index = f.p(&format!("{pipeline}.idx"));
        let run = f.p(&format!("{pipeline}.{jobs}.run"));
        let pipe = ["--pipeline", pipeline, "-m", model.as_str()];
        ok(lemir(
            &[
                &[
                    "--jobs",
                    jobs,
                    "index",
                    "build",
                    "--docs",
                    &f.p("docs.jsonl"),
                    "-o",
                    &index,
                ],
                &pipe[..],
            ]
            .concat(),
        ));
        ok(lemir(
            &[
                &[
                    "--jobs",
                    jobs,
                    "search",
                    "--index",
                    &index,
                    "--queries",
                    &f.p("queries.jsonl"),
                    "-o",
                    &run,
                ],
                &pipe[..],
            ]
            .concat(),
        ));
        runs.push(format!("{pipeline}={run}"));
    }
    let json = f.p(&format!("ir.{jobs}.json"));
    let qrels = f.p("qrels.txt");
    let mut args = vec![
        "--jobs",
        jobs,
        "eval-ir",
        "--qrels",
        qrels.as_str(),
        "--json",
        json.as_str(),
    ];
    for r in &runs {
        args.extend(["--run", r.as_str()]);
    }
    let table = ok(lemir(&args));
    let run = fs::read_to_string(f.path(&format!("lemmatizer.{jobs}.run"))).unwrap();
    (table, fs::read(json).unwrap(), run)
}

#[test]
fn eval_ir_reports_are_byte_identical() {
    let f = Fixture::new();
    f.retrieval_corpus();
    let first = full_ir_pipeline(&f, "1");
    let again = full_ir_pipeline(&f, "1");
    let parallel = full_ir_pipeline(&f, "8");
    assert_eq!(first, again);
    assert_eq!(first, parallel);
    assert!(
        first.0.starts_with("Pipeline       Recall@1"),
        "{}",
        first.0
    );
    assert_eq!(first.0.lines().count(), 4);
}

#[test]
fn scorer_check_accepts_reference_server() {
    let out = ok(lemir(&[
        "scorer",
        "check",
        "--scorer-cmd",
        BIN,
        "--scorer-arg",
        "scorer",
        "--scorer-arg",
        "serve-reference",
        "--fuzz",
        "1000",
    ]));
    assert_eq!(
        out,
        "golden requests: 4, fuzz requests: 1000, violations: 0\n"
    );
}

#[test]
fn span_decoder_through_external_process_matches_in_process() {
    let f = Fixture::new();
    let model = f.p("m.json");
    ok(lemir(&[
        "train",
        "freq",
        "-i",
        &f.p("train.conllu"),
        "-o",
        &model,
    ]));
    let text = f.write("in.txt", "Koera teed .\nTa sööb teed\n");
    let local = ok(lemir(&[
        "lemmatize",
        "-m",
        &model,
        "-i",
        &text,
        "--decoder",
        "span",
        "--threshold",
        "0.3",
    ]));
    let remote = ok(lemir(&[
        "lemmatize",
        "-m",
        &model,
        "-i",
        &text,
        "--decoder",
        "span",
        "--threshold",
        "0.3",
        "--scorer-cmd",
        BIN,
        "--scorer-arg",
        "scorer",
        "--scorer-arg",
        "serve-reference",
    ]));
    assert_eq!(local, remote);
}
