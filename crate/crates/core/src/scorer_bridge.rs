//! Newline-delimited JSON protocol for delegating span/label scoring to an
//! external process, and a client that multiplexes concurrent callers over
//! one connection.
//!
//! Each side first sends the handshake line
//! `{"protocol":"glilem-scorer","version":1}`. After that the client sends
//! [`ScoreRequest`]s and the server answers each with a [`ScoreResponse`] or
//! an error line `{"request_id":..., "error":...}`, in any order. Unknown
//! fields are ignored.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::disambig::SpanScorer;

pub const PROTOCOL_NAME: &str = "glilem-scorer";
pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("missing handshake, got: {0}")]
    MissingHandshake(String),
    #[error("unsupported protocol {name} version {version}")]
    VersionMismatch { name: String, version: u64 },
    #[error("score matrix is {found:?}, expected {expected:?} (spans x labels)")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("span ({start}, {end}) outside the token range")]
    SpanOutOfRange { start: usize, end: usize },
    #[error("empty label")]
    EmptyLabel,
    #[error("duplicate request id `{0}`")]
    DuplicateRequestId(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("scorer reported: {0}")]
    Remote(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for ScorerError {
    fn from(e: io::Error) -> Self {
        ScorerError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: String,
    pub version: u64,
}

impl Handshake {
    pub fn current() -> Self {
        Handshake {
            protocol: PROTOCOL_NAME.to_string(),
            version: PROTOCOL_VERSION as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub tokens: Vec<String>,
    /// Inclusive token index ranges.
    pub spans: Vec<(usize, usize)>,
    pub labels: Vec<String>,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        for &(start, end) in &self.spans {
            if start > end || end >= self.tokens.len() {
                return Err(ProtocolError::SpanOutOfRange { start, end });
            }
        }
        if self.labels.iter().any(String::is_empty) {
            return Err(ProtocolError::EmptyLabel);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: String,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreResponse {
    /// Checks shape against the request and the value range.
    pub fn validate_for(&self, request: &ScoreRequest) -> Result<(), ProtocolError> {
        validate_scores(&self.scores, request.spans.len(), request.labels.len())
    }
}

fn validate_scores(scores: &[Vec<f64>], spans: usize, labels: usize) -> Result<(), ProtocolError> {
    if scores.len() != spans || scores.iter().any(|r| r.len() != labels) {
        return Err(ProtocolError::DimensionMismatch {
            expected: (spans, labels),
            found: (scores.len(), scores.first().map_or(0, Vec::len)),
        });
    }
    if let Some(&v) = scores
        .iter()
        .flatten()
        .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
    {
        return Err(ProtocolError::OutOfRange(v));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub request_id: String,
    pub error: String,
}

/// Anything a server may send after its handshake.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Handshake(Handshake),
    Response(ScoreResponse),
    Error(ErrorResponse),
}

/// Serialize one message as a single line, newline included. JSON escapes
/// newlines inside strings, so the output never contains a raw line break
/// before the terminator.
pub fn encode<T: Serialize>(message: &T) -> String {
    let mut line = serde_json::to_string(message).expect("protocol messages serialize");
    line.push('\n');
    line
}

fn parse_object(line: &str) -> Result<serde_json::Map<String, Value>, ProtocolError> {
    match serde_json::from_str::<Value>(line.trim_end_matches(['\n', '\r'])) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ProtocolError::Malformed("expected a JSON object".into())),
        Err(e) => Err(ProtocolError::Malformed(e.to_string())),
    }
}

fn from_map<T: for<'de> Deserialize<'de>>(
    map: serde_json::Map<String, Value>,
) -> Result<T, ProtocolError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn decode_handshake(line: &str) -> Result<Handshake, ProtocolError> {
    let map = parse_object(line)?;
    if !map.contains_key("protocol") {
        return Err(ProtocolError::MissingHandshake(
            line.trim_end().chars().take(80).collect(),
        ));
    }
    let hs: Handshake = from_map(map)?;
    if hs.protocol != PROTOCOL_NAME || hs.version != PROTOCOL_VERSION as u64 {
        return Err(ProtocolError::VersionMismatch {
            name: hs.protocol,
            version: hs.version,
        });
    }
    Ok(hs)
}

/// Decode and validate a request on the server side.
pub fn decode_request(line: &str) -> Result<ScoreRequest, ProtocolError> {
    let req: ScoreRequest = from_map(parse_object(line)?)?;
    req.validate()?;
    Ok(req)
}

/// Decode a server line. Range is checked here; shape needs the request and
/// is checked by [`ScoreResponse::validate_for`].
pub fn decode_server_message(line: &str) -> Result<ServerMessage, ProtocolError> {
    let map = parse_object(line)?;
    if map.contains_key("protocol") {
        return decode_handshake(line).map(ServerMessage::Handshake);
    }
    if map.contains_key("scores") {
        let resp: ScoreResponse = from_map(map)?;
        if let Some(&v) = resp
            .scores
            .iter()
            .flatten()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ProtocolError::OutOfRange(v));
        }
        return Ok(ServerMessage::Response(resp));
    }
    if map.contains_key("error") {
        return from_map(map).map(ServerMessage::Error);
    }
    Err(ProtocolError::Malformed(
        "neither handshake, response nor error".into(),
    ))
}

/// Tracks request ids seen on one connection.
#[derive(Debug, Default)]
pub struct RequestIds {
    seen: HashSet<String>,
}

impl RequestIds {
    pub fn register(&mut self, id: &str) -> Result<(), ProtocolError> {
        if self.seen.insert(id.to_string()) {
            Ok(())
        } else {
            Err(ProtocolError::DuplicateRequestId(id.to_string()))
        }
    }
}

struct Pending {
    dims: (usize, usize),
    reply: Sender<Result<ScoreResponse, ScorerError>>,
}

#[derive(Default)]
struct Inflight {
    pending: HashMap<String, Pending>,
    ids: RequestIds,
    closed: Option<ScorerError>,
}

impl Inflight {
    fn close(&mut self, err: ScorerError) {
        if self.closed.is_none() {
            self.closed = Some(err.clone());
        }
        for (_, p) in self.pending.drain() {
            let _ = p.reply.send(Err(err.clone()));
        }
    }
}

/// Client side of the protocol.
///
/// Any number of threads may call [`ScorerClient::remote_score`] at once;
/// a reader thread routes each response to its caller by `request_id`.
pub struct ScorerClient {
    writer: Mutex<Option<Box<dyn Write + Send>>>,
    inflight: Arc<Mutex<Inflight>>,
    next_id: AtomicU64,
    timeout: Duration,
    child: Mutex<Option<Child>>,
}

impl ScorerClient {
    /// Perform the handshake over an established byte stream.
    pub fn connect<R, W>(reader: R, mut writer: W, timeout: Duration) -> Result<Self, ScorerError>
    where
        R: io::Read + Send + 'static,
        W: Write + Send + 'static,
    {
        writer.write_all(encode(&Handshake::current()).as_bytes())?;
        writer.flush()?;

        let inflight = Arc::new(Mutex::new(Inflight::default()));
        let (hs_tx, hs_rx) = mpsc::channel();
        let table = Arc::clone(&inflight);
        thread::Builder::new()
            .name("scorer-reader".into())
            .spawn(move || read_loop(BufReader::new(reader), table, hs_tx))?;

        match hs_rx.recv_timeout(timeout) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(e),
            Err(RecvTimeoutError::Timeout) => return Err(ScorerError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => return Err(ScorerError::ConnectionClosed),
        }

        Ok(ScorerClient {
            writer: Mutex::new(Some(Box::new(writer))),
            inflight,
            next_id: AtomicU64::new(0),
            timeout,
            child: Mutex::new(None),
        })
    }

    /// Spawn `program` and talk to it over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> Result<Self, ScorerError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect(stdout, stdin, timeout) {
            Ok(client) => {
                *client.child.lock().unwrap() = Some(child);
                Ok(client)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn connect_tcp<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self, ScorerError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::connect(reader, TcpWriter(stream), timeout)
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn next_request_id(&self) -> String {
        format!("r{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    /// Send one request and wait for its response.
    pub fn remote_score(&self, request: &ScoreRequest) -> Result<ScoreResponse, ScorerError> {
        self.remote_score_with_timeout(request, self.timeout)
    }

    pub fn remote_score_with_timeout(
        &self,
        request: &ScoreRequest,
        timeout: Duration,
    ) -> Result<ScoreResponse, ScorerError> {
        request.validate()?;
        let (tx, rx) = mpsc::channel();
        {
            let mut table = self.inflight.lock().unwrap();
            if let Some(err) = &table.closed {
                return Err(err.clone());
            }
            table.ids.register(&request.request_id)?;
            table.pending.insert(
                request.request_id.clone(),
                Pending {
                    dims: (request.spans.len(), request.labels.len()),
                    reply: tx,
                },
            );
        }

        let written = {
            let mut writer = self.writer.lock().unwrap();
            match writer.as_mut() {
                Some(w) => w
                    .write_all(encode(request).as_bytes())
                    .and_then(|_| w.flush()),
                None => Err(io::Error::new(
                    io::ErrorKind::BrokenPipe,
                    "client shut down",
                )),
            }
        };
        if written.is_err() {
            self.inflight
                .lock()
                .unwrap()
                .pending
                .remove(&request.request_id);
            return Err(ScorerError::ConnectionClosed);
        }

        let deadline = Instant::now() + timeout;
        match rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok(result) => result,
            Err(RecvTimeoutError::Timeout) => {
                self.inflight
                    .lock()
                    .unwrap()
                    .pending
                    .remove(&request.request_id);
                Err(ScorerError::Timeout(timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(ScorerError::ConnectionClosed),
        }
    }
}

/// Write half of a TCP connection. Dropping the clone alone would leave the
/// socket open while the reader thread holds its half, so the server would
/// never see end of input.
struct TcpWriter(TcpStream);

impl Write for TcpWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

impl Drop for TcpWriter {
    fn drop(&mut self) {
        let _ = self.0.shutdown(std::net::Shutdown::Write);
    }
}

fn read_loop<R: BufRead>(
    reader: R,
    table: Arc<Mutex<Inflight>>,
    handshake: Sender<Result<(), ScorerError>>,
) {
    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(Ok(line)) => decode_handshake(&line)
            .map(|_| ())
            .map_err(ScorerError::from),
        Some(Err(e)) => Err(e.into()),
        None => Err(ScorerError::ConnectionClosed),
    };
    let ok = first.is_ok();
    if let Err(e) = &first {
        table.lock().unwrap().close(e.clone());
    }
    let _ = handshake.send(first);
    if !ok {
        return;
    }

    for line in lines {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut t = table.lock().unwrap();
        match decode_server_message(&line) {
            Ok(ServerMessage::Response(resp)) => {
                // Responses for timed-out or unknown ids are dropped.
                if let Some(p) = t.pending.remove(&resp.request_id) {
                    let result = validate_scores(&resp.scores, p.dims.0, p.dims.1)
                        .map(|_| resp)
                        .map_err(ScorerError::from);
                    let _ = p.reply.send(result);
                }
            }
            Ok(ServerMessage::Error(err)) => {
                if let Some(p) = t.pending.remove(&err.request_id) {
                    let _ = p.reply.send(Err(ScorerError::Remote(err.error)));
                }
            }
            Ok(ServerMessage::Handshake(_)) => {
                t.close(ScorerError::Protocol(ProtocolError::Malformed(
                    "repeated handshake".into(),
                )));
                return;
            }
            Err(e) => {
                t.close(ScorerError::Protocol(e));
                return;
            }
        }
    }
    table.lock().unwrap().close(ScorerError::ConnectionClosed);
}

impl SpanScorer for ScorerClient {
    fn score(
        &self,
        tokens: &[String],
        spans: &[(usize, usize)],
        labels: &[String],
    ) -> Result<Vec<Vec<f64>>, ScorerError> {
        let request = ScoreRequest {
            request_id: self.next_request_id(),
            tokens: tokens.to_vec(),
            spans: spans.to_vec(),
            labels: labels.to_vec(),
        };
        self.remote_score(&request).map(|r| r.scores)
    }
}

impl Drop for ScorerClient {
    fn drop(&mut self) {
        // closing stdin lets a well-behaved child exit on its own
        self.writer.lock().unwrap().take();
        if let Some(mut child) = self.child.lock().unwrap().take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        thread::sleep(Duration::from_millis(20))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

/// Serve `scorer` over a byte stream, one request at a time, until the
/// client disconnects.
pub fn serve<R: BufRead, W: Write, S: SpanScorer + ?Sized>(
    reader: R,
    mut writer: W,
    scorer: &S,
) -> Result<(), ScorerError> {
    writer.write_all(encode(&Handshake::current()).as_bytes())?;
    writer.flush()?;
    let mut lines = reader.lines();
    match lines.next() {
        Some(line) => {
            decode_handshake(&line?)?;
        }
        None => return Ok(()),
    }
    let mut ids = RequestIds::default();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request_id = parse_object(&line)
            .ok()
            .and_then(|m| {
                m.get("request_id")
                    .and_then(Value::as_str)
                    .map(String::from)
            })
            .unwrap_or_default();
        let reply = decode_request(&line)
            .and_then(|req| ids.register(&req.request_id).map(|_| req))
            .map_err(ScorerError::from)
            .and_then(|req| {
                let scores = scorer.score(&req.tokens, &req.spans, &req.labels)?;
                validate_scores(&scores, req.spans.len(), req.labels.len())?;
                Ok(ScoreResponse {
                    request_id: req.request_id,
                    scores,
                })
            });
        let out = match reply {
            Ok(resp) => encode(&resp),
            Err(e) => encode(&ErrorResponse {
                request_id,
                error: e.to_string(),
            }),
        };
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Outcome of [`check_conformance`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub golden_cases: usize,
    pub fuzz_cases: usize,
    pub violations: Vec<String>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn golden_requests() -> Vec<ScoreRequest> {
    let toks = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let labels = |l: &[&str]| l.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        ScoreRequest {
            request_id: "golden-0".into(),
            tokens: toks("Koerad jooksid kiiresti ."),
            spans: vec![(0, 0), (1, 1), (2, 2)],
            labels: labels(&["U|P|S-", "U|P|S--", "U|P|S---+m+a"]),
        },
        ScoreRequest {
            request_id: "golden-1".into(),
            tokens: toks("ja"),
            spans: vec![(0, 0)],
            labels: vec![],
        },
        ScoreRequest {
            request_id: "golden-2".into(),
            tokens: toks("Eesti Vabariik"),
            spans: vec![(0, 0), (0, 1)],
            labels: labels(&["U0:1|P|S", "U0:1|P|S-"]),
        },
        ScoreRequest {
            request_id: "golden-3".into(),
            tokens: toks("x"),
            spans: vec![],
            labels: labels(&["U|P|S-"]),
        },
    ]
}

/// Drive a connected scorer through fixed requests and `fuzz_cases` random
/// ones, recording every shape, range or transport violation. Each golden
/// request is sent twice to check determinism.
pub fn check_conformance(client: &ScorerClient, fuzz_cases: usize, seed: u64) -> ConformanceReport {
    use rand::{Rng, SeedableRng};

    let mut report = ConformanceReport::default();
    let check = |report: &mut ConformanceReport, mut req: ScoreRequest| -> Option<Vec<Vec<f64>>> {
        req.request_id = format!("{}-{}", req.request_id, client.next_request_id());
        match client.remote_score(&req) {
            Ok(resp) => match resp.validate_for(&req) {
                Ok(()) => Some(resp.scores),
                Err(e) => {
                    report.violations.push(format!("{}: {e}", req.request_id));
                    None
                }
            },
            Err(e) => {
                report.violations.push(format!("{}: {e}", req.request_id));
                None
            }
        }
    };

    for req in golden_requests() {
        report.golden_cases += 1;
        let first = check(&mut report, req.clone());
        let second = check(&mut report, req.clone());
        if let (Some(a), Some(b)) = (first, second) {
            if a != b {
                report.violations.push(format!(
                    "{}: repeated request gave different scores",
                    req.request_id
                ));
            }
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    const ALPHABET: &[char] = &[
        'a', 'e', 'i', 'k', 'l', 'm', 's', 't', 'õ', 'ä', 'ö', 'ü', 'K', 'T', '.', ',',
    ];
    for i in 0..fuzz_cases {
        let n_tokens = rng.gen_range(1..=12);
        let tokens: Vec<String> = (0..n_tokens)
            .map(|_| {
                (0..rng.gen_range(1..=8))
                    .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())])
                    .collect()
            })
            .collect();
        let spans = (0..rng.gen_range(0..=n_tokens))
            .map(|_| {
                let start = rng.gen_range(0..n_tokens);
                let end = (start + rng.gen_range(0..2)).min(n_tokens - 1);
                (start, end)
            })
            .collect();
        let labels = (0..rng.gen_range(0..=6))
            .map(|_| {
                let deletes = "-".repeat(rng.gen_range(0..4));
                let inserts: String = (0..rng.gen_range(0..3))
                    .map(|_| format!("+{}", ALPHABET[rng.gen_range(0..8)]))
                    .collect();
                format!("U|P|S{deletes}{inserts}")
            })
            .collect();
        report.fuzz_cases += 1;
        check(
            &mut report,
            ScoreRequest {
                request_id: format!("fuzz-{i}"),
                tokens,
                spans,
                labels,
            },
        );
    }
    report
}
