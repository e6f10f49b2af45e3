//! End-to-end tests of the scorer protocol over real byte streams.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::os::unix::net::UnixStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use lemir_core::candidates::{CandidateLattice, CandidateSet};
use lemir_core::disambig::{
    span_match_disambiguate, ReferenceScorer, SpanMatcher, SpanMatcherConfig,
};
use lemir_core::scorer_bridge::{
    check_conformance, decode_request, encode, serve, ErrorResponse, Handshake, ProtocolError,
    ScoreRequest, ScoreResponse, ScorerClient, ScorerError,
};
use lemir_core::{Disambiguator, Sentence, SpanScorer, DO_NOTHING};
use proptest::prelude::*;

const TIMEOUT: Duration = Duration::from_secs(10);

/// Scripted server end: sends `greeting`, reads the client handshake, then
/// hands the line reader and writer to `body`.
fn scripted<F>(greeting: &str, body: F) -> (UnixStream, thread::JoinHandle<()>)
where
    F: FnOnce(&mut dyn Iterator<Item = String>, &mut UnixStream) + Send + 'static,
{
    let (client, server) = UnixStream::pair().unwrap();
    let greeting = greeting.to_string();
    let handle = thread::spawn(move || {
        let mut writer = server.try_clone().unwrap();
        writer.write_all(greeting.as_bytes()).unwrap();
        let mut lines = BufReader::new(server).lines().map_while(Result::ok);
        let _client_handshake = lines.next();
        body(&mut lines, &mut writer);
    });
    (client, handle)
}

fn handshake() -> String {
    encode(&Handshake::current())
}

/// Shuts the write half on drop so the server sees end of input even though
/// the client's reader thread still holds the socket.
struct HalfCloser(UnixStream);

impl Write for HalfCloser {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

impl Drop for HalfCloser {
    fn drop(&mut self) {
        let _ = self.0.shutdown(std::net::Shutdown::Write);
    }
}

fn connect(stream: UnixStream, timeout: Duration) -> Result<ScorerClient, ScorerError> {
    ScorerClient::connect(stream.try_clone().unwrap(), HalfCloser(stream), timeout)
}

fn request(id: &str, n_tokens: usize, labels: &[&str]) -> ScoreRequest {
    ScoreRequest {
        request_id: id.into(),
        tokens: (0..n_tokens).map(|i| format!("t{i}")).collect(),
        spans: (0..n_tokens).map(|i| (i, i)).collect(),
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

/// Constant score matrix of the request's shape.
fn constant(req: &ScoreRequest, v: f64) -> ScoreResponse {
    ScoreResponse {
        request_id: req.request_id.clone(),
        scores: vec![vec![v; req.labels.len()]; req.spans.len()],
    }
}

/// Replies to the first `n` requests in the order given by `order`
/// (indices into arrival order); each reply's value encodes the token count.
fn reorder_server(
    order: Vec<usize>,
) -> impl FnOnce(&mut dyn Iterator<Item = String>, &mut UnixStream) + Send {
    move |lines, w| {
        let reqs: Vec<ScoreRequest> = lines
            .take(order.len())
            .map(|l| decode_request(&l).unwrap())
            .collect();
        for &i in &order {
            let r = &reqs[i];
            w.write_all(encode(&constant(r, r.tokens.len() as f64 / 100.0)).as_bytes())
                .unwrap();
        }
        w.flush().unwrap();
        for _ in lines {}
    }
}

fn concurrent_calls(
    client: &Arc<ScorerClient>,
    n: usize,
) -> Vec<Result<ScoreResponse, ScorerError>> {
    let handles: Vec<_> = (1..=n)
        .map(|k| {
            let c = Arc::clone(client);
            thread::spawn(move || c.remote_score(&request(&format!("q{k}"), k, &["U|P|S-"])))
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

#[test]
fn pipelined_requests_answered_in_reverse_order() {
    let n = 8;
    let (stream, server) = scripted(&handshake(), reorder_server((0..n).rev().collect()));
    let client = Arc::new(connect(stream, TIMEOUT).unwrap());
    for (k, res) in (1..=n).zip(concurrent_calls(&client, n)) {
        let resp = res.unwrap();
        assert_eq!(resp.request_id, format!("q{k}"));
        assert_eq!(resp.scores, vec![vec![k as f64 / 100.0]; k]);
    }
    drop(client);
    server.join().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn any_reply_permutation_routes_to_the_right_caller(order in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let n = order.len();
        let (stream, server) = scripted(&handshake(), reorder_server(order));
        let client = Arc::new(connect(stream, TIMEOUT).unwrap());
        for (k, res) in (1..=n).zip(concurrent_calls(&client, n)) {
            let resp = res.unwrap();
            prop_assert_eq!(&resp.request_id, &format!("q{k}"));
            prop_assert_eq!(resp.scores.len(), k);
        }
        drop(client);
        server.join().unwrap();
    }
}

#[test]
fn echo_scorer_at_half_selects_label_at_threshold() {
    let (stream, server) = scripted(&handshake(), |lines, w| {
        for line in lines {
            let req = decode_request(&line).unwrap();
            w.write_all(encode(&constant(&req, 0.5)).as_bytes())
                .unwrap();
        }
    });
    let client = connect(stream, TIMEOUT).unwrap();
    let sentence = Sentence::from_forms("s", &["teed", "ja"]);
    let lattice = CandidateLattice {
        sets: vec![
            CandidateSet::from_lemmas(0, "teed", &["tee", "tegema"]).unwrap(),
            CandidateSet::from_lemmas(1, "ja", &[] as &[&str]).unwrap(),
        ],
        sentence,
    };
    let config = SpanMatcherConfig {
        threshold: 0.5,
        ..SpanMatcherConfig::default()
    };
    let res = span_match_disambiguate(&lattice, &client, &config).unwrap();
    // all labels tie at 0.5 >= τ: the smallest rule string wins, and "ja"
    // has no label so it stays unchanged
    assert_eq!(res.decisions[0].rule, "U|P|S-");
    assert_eq!(res.decisions[0].lemma, "tee");
    assert_eq!(res.decisions[0].score, 0.5);
    assert_eq!(res.decisions[1].rule, DO_NOTHING);

    let strict = SpanMatcherConfig {
        threshold: 0.51,
        ..config
    };
    let res = span_match_disambiguate(&lattice, &client, &strict).unwrap();
    assert_eq!(res.decisions[0].rule, DO_NOTHING);
    assert_eq!(res.decisions[0].score, 0.5);
    drop(client);
    server.join().unwrap();
}

#[test]
fn scorer_exit_mid_request_is_connection_closed() {
    let (stream, server) = scripted(&handshake(), |lines, _w| {
        let _ = lines.next();
        // return without answering; the stream closes
    });
    let client = connect(stream, TIMEOUT).unwrap();
    let err = client.remote_score(&request("a", 2, &["x"])).unwrap_err();
    assert_eq!(err, ScorerError::ConnectionClosed);
    server.join().unwrap();
    // later calls fail fast
    assert_eq!(
        client.remote_score(&request("b", 1, &["x"])).unwrap_err(),
        ScorerError::ConnectionClosed
    );
}

#[test]
fn silent_scorer_times_out_and_late_replies_are_dropped() {
    let (stream, server) = scripted(&handshake(), |lines, w| {
        let first = decode_request(&lines.next().unwrap()).unwrap();
        let second = decode_request(&lines.next().unwrap()).unwrap();
        // late reply to the timed-out request, then the real one
        w.write_all(encode(&constant(&first, 0.1)).as_bytes())
            .unwrap();
        w.write_all(encode(&constant(&second, 0.9)).as_bytes())
            .unwrap();
        for _ in lines {}
    });
    let client = connect(stream, TIMEOUT).unwrap();
    let err = client
        .remote_score_with_timeout(&request("slow", 1, &["x"]), Duration::from_millis(150))
        .unwrap_err();
    assert_eq!(err, ScorerError::Timeout(Duration::from_millis(150)));
    let resp = client.remote_score(&request("next", 1, &["x"])).unwrap();
    assert_eq!(resp.scores, vec![vec![0.9]]);
    drop(client);
    server.join().unwrap();
}

#[test]
fn remote_errors_and_bad_matrices_are_reported() {
    let (stream, server) = scripted(&handshake(), |lines, w| {
        for line in lines {
            let req = decode_request(&line).unwrap();
            let out = match req.request_id.as_str() {
                "err" => encode(&ErrorResponse {
                    request_id: req.request_id.clone(),
                    error: "model exploded".into(),
                }),
                "shape" => encode(&ScoreResponse {
                    request_id: req.request_id.clone(),
                    scores: vec![vec![0.5]],
                }),
                _ => encode(&constant(&req, 0.25)),
            };
            w.write_all(out.as_bytes()).unwrap();
        }
    });
    let client = connect(stream, TIMEOUT).unwrap();
    assert_eq!(
        client.remote_score(&request("err", 1, &["x"])).unwrap_err(),
        ScorerError::Remote("model exploded".into())
    );
    assert_eq!(
        client
            .remote_score(&request("shape", 2, &["x", "y"]))
            .unwrap_err(),
        ScorerError::Protocol(ProtocolError::DimensionMismatch {
            expected: (2, 2),
            found: (1, 1)
        })
    );
    // the connection survives per-request failures
    assert_eq!(
        client
            .remote_score(&request("ok", 1, &["x"]))
            .unwrap()
            .scores,
        vec![vec![0.25]]
    );
    assert_eq!(
        client.remote_score(&request("ok", 1, &["x"])).unwrap_err(),
        ScorerError::Protocol(ProtocolError::DuplicateRequestId("ok".into()))
    );
    drop(client);
    server.join().unwrap();
}

#[test]
fn out_of_range_score_poisons_the_connection() {
    let (stream, server) = scripted(&handshake(), |lines, w| {
        let req = decode_request(&lines.next().unwrap()).unwrap();
        w.write_all(encode(&constant(&req, 1.5)).as_bytes())
            .unwrap();
        for _ in lines {}
    });
    let client = connect(stream, TIMEOUT).unwrap();
    assert_eq!(
        client.remote_score(&request("a", 1, &["x"])).unwrap_err(),
        ScorerError::Protocol(ProtocolError::OutOfRange(1.5))
    );
    drop(client);
    server.join().unwrap();
}

#[test]
fn handshake_failures() {
    let (stream, server) = scripted(
        "{\"protocol\":\"glilem-scorer\",\"version\":2}\n",
        |_, _| {},
    );
    assert_eq!(
        connect(stream, TIMEOUT).err().unwrap(),
        ScorerError::Protocol(ProtocolError::VersionMismatch {
            name: "glilem-scorer".into(),
            version: 2
        })
    );
    server.join().unwrap();

    let (stream, server) = scripted("{\"request_id\":\"x\",\"scores\":[]}\n", |_, _| {});
    assert!(matches!(
        connect(stream, TIMEOUT).err().unwrap(),
        ScorerError::Protocol(ProtocolError::MissingHandshake(_))
    ));
    server.join().unwrap();

    // nothing at all within the timeout
    let (client_end, server_end) = UnixStream::pair().unwrap();
    assert_eq!(
        connect(client_end, Duration::from_millis(100))
            .err()
            .unwrap(),
        ScorerError::Timeout(Duration::from_millis(100))
    );
    drop(server_end);
}

fn serve_reference() -> (UnixStream, thread::JoinHandle<()>) {
    let (client, server) = UnixStream::pair().unwrap();
    let handle = thread::spawn(move || {
        let writer = server.try_clone().unwrap();
        serve(BufReader::new(server), writer, &ReferenceScorer::default()).unwrap();
    });
    (client, handle)
}

#[test]
fn served_reference_scorer_matches_in_process() {
    let (stream, server) = serve_reference();
    let client = Arc::new(connect(stream, TIMEOUT).unwrap());
    let tokens: Vec<String> = ["Koerad", "jooksid", "metsa"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let labels: Vec<String> = ["U|P|S-", "U|P|S--+m+a", "U0:1|P|S"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let spans = vec![(0, 0), (1, 2), (2, 2)];
    let local = ReferenceScorer::default()
        .score(&tokens, &spans, &labels)
        .unwrap();
    assert_eq!(client.score(&tokens, &spans, &labels).unwrap(), local);

    let train = vec![Sentence::from_pairs(
        "a",
        &[
            ("Koerad", "koer"),
            ("jooksid", "jooksma"),
            ("metsa", "mets"),
        ],
    )];
    let gen = lemir_core::DictionaryGenerator::build(&train);
    let lattice = gen.generate(&Sentence::from_forms("b", &["koerad", "metsa", "jooksid"]));
    let remote = SpanMatcher::new(Arc::clone(&client), SpanMatcherConfig::default());
    let local = SpanMatcher::new(ReferenceScorer::default(), SpanMatcherConfig::default());
    assert_eq!(
        remote.disambiguate(&lattice).unwrap(),
        local.disambiguate(&lattice).unwrap()
    );

    // server answers invalid requests with an error line and keeps going
    let bad = ScoreRequest {
        request_id: "bad".into(),
        tokens: vec!["a".into()],
        spans: vec![],
        labels: vec![],
    };
    assert_eq!(
        client.remote_score(&bad).unwrap().scores,
        Vec::<Vec<f64>>::new()
    );
    drop(remote);
    drop(client);
    server.join().unwrap();
}

#[test]
fn conformance_passes_for_reference_and_flags_broken_scorer() {
    let (stream, server) = serve_reference();
    let client = connect(stream, TIMEOUT).unwrap();
    let report = check_conformance(&client, 1000, 42);
    assert!(report.passed(), "{:?}", report.violations);
    assert_eq!((report.golden_cases, report.fuzz_cases), (4, 1000));
    drop(client);
    server.join().unwrap();

    // always answers with a 1x1 matrix
    let (stream, server) = scripted(&handshake(), |lines, w| {
        for line in lines {
            let req = decode_request(&line).unwrap();
            let resp = ScoreResponse {
                request_id: req.request_id,
                scores: vec![vec![0.5]],
            };
            w.write_all(encode(&resp).as_bytes()).unwrap();
        }
    });
    let client = connect(stream, TIMEOUT).unwrap();
    let report = check_conformance(&client, 50, 1);
    assert!(!report.passed());
    assert!(
        report.violations.iter().all(|v| v.contains("matrix")),
        "{:?}",
        report.violations
    );
    drop(client);
    server.join().unwrap();
}

#[test]
fn tcp_transport() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || {
        let (conn, _) = listener.accept().unwrap();
        let writer = conn.try_clone().unwrap();
        serve(BufReader::new(conn), writer, &ReferenceScorer::default()).unwrap();
    });
    let client = ScorerClient::connect_tcp(addr, TIMEOUT).unwrap();
    let resp = client
        .remote_score(&request("t", 3, &["U|P|S-", "U|P|S"]))
        .unwrap();
    assert_eq!(resp.scores.len(), 3);
    assert!(resp
        .scores
        .iter()
        .flatten()
        .all(|v| (0.0..=1.0).contains(v)));
    drop(client);
    server.join().unwrap();
}
