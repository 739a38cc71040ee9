//! Shared fixtures for the integration tests: a local HTTP server, a
//! deterministic simulated chat model, an entailment stub and fixture paths.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use serde_json::{json, Value};
use star_forge::backend::{sha256_hex, BackendError, ChatBackend, ChatRequest, Completion};
use star_forge::refine::{EntailmentJudge, Judgment, RefineError};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

// ---------------------------------------------------------------- server

#[derive(Debug, Clone)]
pub struct FakeRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl FakeRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or(Value::Null)
    }
}

pub struct FakeResponse {
    pub status: u16,
    pub body: String,
}

impl FakeResponse {
    pub fn json(status: u16, body: Value) -> Self {
        FakeResponse {
            status,
            body: body.to_string(),
        }
    }
}

type Handler = dyn Fn(&FakeRequest) -> FakeResponse + Send + Sync;

/// HTTP/1.1 server on an ephemeral localhost port. Every connection is
/// served on its own thread and closed after one response.
pub struct FakeServer {
    addr: String,
    stop: Arc<AtomicBool>,
    arrivals: Arc<Mutex<Vec<Instant>>>,
    requests: Arc<AtomicUsize>,
    accept: Option<JoinHandle<()>>,
}

impl FakeServer {
    pub fn start(handler: impl Fn(&FakeRequest) -> FakeResponse + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let addr = listener.local_addr().unwrap().to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let arrivals = Arc::new(Mutex::new(Vec::new()));
        let requests = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let (stop, arrivals, requests) = (stop.clone(), arrivals.clone(), requests.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let (handler, arrivals, requests) = (handler.clone(), arrivals.clone(), requests.clone());
                    std::thread::spawn(move || serve(stream, &*handler, &arrivals, &requests));
                }
            })
        };
        FakeServer {
            addr,
            stop,
            arrivals,
            requests,
            accept: Some(accept),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Arrival instant of every request, in arrival order.
    pub fn arrivals(&self) -> Vec<Instant> {
        let mut a = self.arrivals.lock().unwrap().clone();
        a.sort();
        a
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, handler: &Handler, arrivals: &Mutex<Vec<Instant>>, requests: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let arrived = Instant::now();
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    arrivals.lock().unwrap().push(arrived);
    requests.fetch_add(1, Ordering::SeqCst);
    let req = FakeRequest {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let resp = handler(&req);
    let mut stream = stream;
    let head = format!(
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        resp.status,
        resp.body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(resp.body.as_bytes());
    let _ = stream.flush();
    let _ = stream.shutdown(Shutdown::Both);
}

/// A listening socket that only counts connection attempts.
pub struct ConnectionCounter {
    addr: String,
    count: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
}

impl ConnectionCounter {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let addr = listener.local_addr().unwrap().to_string();
        let count = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (c, s) = (count.clone(), stop.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                if conn.is_ok() {
                    c.fetch_add(1, Ordering::SeqCst);
                }
            }
        });
        ConnectionCounter { addr, count, stop }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn connections(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl Drop for ConnectionCounter {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
    }
}

/// Chat-completions handler backed by `respond`.
pub fn chat_handler(respond: fn(&str) -> String) -> impl Fn(&FakeRequest) -> FakeResponse + Send + Sync {
    move |req| {
        let body = req.json();
        let prompt = body
            .pointer("/messages")
            .and_then(Value::as_array)
            .and_then(|m| m.last())
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .unwrap_or_default();
        let text = respond(prompt);
        FakeResponse::json(
            200,
            json!({
                "id": format!("sim-{}", &sha256_hex(req.body.as_bytes())[..16]),
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
            }),
        )
    }
}

/// `{premise, hypothesis}` handler backed by [`StubEntailment`].
pub fn entailment_handler(req: &FakeRequest) -> FakeResponse {
    let body = req.json();
    let premise = body["premise"].as_str().unwrap_or_default();
    let hypothesis = body["hypothesis"].as_str().unwrap_or_default();
    let j = StubEntailment.judge(premise, hypothesis).unwrap();
    FakeResponse::json(200, json!({"entailed": j.entailed, "score": j.score}))
}

// ------------------------------------------------------- simulated model

pub const TARGET_MARKER: &str = "Now write the passage for the following structure.\n";
pub const REFLECTION_MARKER: &str = "Read the passage and answer the question.";
pub const REVISION_MARKER: &str = "Revised passage:";
pub const EMPTY_PASSAGE: &str = "Nothing notable happened that day.";

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub event_type: String,
    pub trigger: String,
    pub args: Vec<(String, Option<String>)>,
}

impl SimEvent {
    fn filled(&self) -> Vec<(&str, &str)> {
        self.args
            .iter()
            .filter_map(|(r, v)| v.as_deref().map(|v| (r.as_str(), v)))
            .collect()
    }

    fn first_none(&self) -> Option<&str> {
        self.args.iter().find(|(_, v)| v.is_none()).map(|(r, _)| r.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimTarget {
    Events(Vec<SimEvent>),
    Relation { subject: String, object: String, relation: String },
}

/// Parses the verbalized target that follows [`TARGET_MARKER`].
pub fn parse_target(prompt: &str) -> Option<SimTarget> {
    let start = prompt.rfind(TARGET_MARKER)? + TARGET_MARKER.len();
    let section = &prompt[start..];
    let lines: Vec<&str> = section.lines().take_while(|l| !l.starts_with("Passage:")).collect();
    if lines.first()?.starts_with("Number of relations") {
        let field = |name: &str| {
            lines
                .iter()
                .find_map(|l| l.strip_prefix(name))
                .map(|v| v.trim().to_string())
        };
        return Some(SimTarget::Relation {
            subject: field("Subject:")?,
            object: field("Object:")?,
            relation: field("Relation:")?,
        });
    }
    let mut events = Vec::new();
    for line in lines.iter().filter(|l| l.starts_with("Event ")) {
        let (_, rest) = line.split_once(": ")?;
        let mut ev = SimEvent {
            event_type: String::new(),
            trigger: String::new(),
            args: Vec::new(),
        };
        for part in rest.split(", ") {
            let (k, v) = part.split_once('=')?;
            match k {
                "type" => ev.event_type = v.to_string(),
                "trigger" => ev.trigger = v.to_string(),
                role => ev.args.push((role.to_string(), (v != "None").then(|| v.to_string()))),
            }
        }
        events.push(ev);
    }
    Some(SimTarget::Events(events))
}

fn target_text(prompt: &str) -> &str {
    prompt
        .rfind(TARGET_MARKER)
        .map(|i| &prompt[i..])
        .map(|s| s.split("\nPassage:").next().unwrap_or(s))
        .unwrap_or(prompt)
}

/// Injected defects, all on the first event.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Defects {
    /// First filled argument left out.
    pub omit: bool,
    /// A sentence about the first `None` role.
    pub hallucinate: bool,
    /// Second filled argument only in a detached, untagged sentence.
    pub detach: bool,
}

impl Defects {
    pub fn any(&self) -> bool {
        self.omit || self.hallucinate || self.detach
    }

    fn applicable(self, events: &[SimEvent]) -> Self {
        let Some(ev) = events.first() else {
            return Defects::default();
        };
        let filled = ev.filled().len();
        Defects {
            omit: self.omit && filled >= 1,
            hallucinate: self.hallucinate && ev.first_none().is_some(),
            detach: self.detach && filled >= 2,
        }
    }
}

/// Defects chosen for a first draft, from a hash of the target.
pub fn initial_defects(prompt: &str) -> Defects {
    let h = sha256_hex(target_text(prompt).as_bytes());
    let bits = u8::from_str_radix(&h[..2], 16).unwrap();
    Defects {
        omit: bits & 1 != 0,
        hallucinate: bits & 2 != 0,
        detach: bits & 4 != 0,
    }
}

pub fn hallucination_sentence(role: &str, trigger: &str) -> String {
    format!("The {role} of the {trigger} event was also described in detail.")
}

pub fn detached_sentence(mention: &str) -> String {
    format!("Separately, {mention} was mentioned.")
}

/// Tagged passage for `target` with `defects` applied.
pub fn render_passage(target: &SimTarget, defects: Defects) -> String {
    let events = match target {
        SimTarget::Relation { subject, object, relation } => {
            return format!("<Subject>{subject}</Subject> stands in the {relation} relation to <Object>{object}</Object>.");
        }
        SimTarget::Events(events) => events,
    };
    if events.is_empty() {
        return EMPTY_PASSAGE.to_string();
    }
    let defects = defects.applicable(events);
    let multi = events.len() > 1;
    let mut sentences = Vec::new();
    for (i, ev) in events.iter().enumerate() {
        let sfx = if multi { (i + 1).to_string() } else { String::new() };
        let mut filled = ev.filled();
        let mut detached = None;
        if i == 0 {
            if defects.detach {
                detached = Some(filled.remove(1).1);
            }
            if defects.omit {
                filled.remove(0);
            }
        }
        let trigger = format!("<Trigger{sfx}>{}</Trigger{sfx}>", ev.trigger);
        if filled.is_empty() {
            sentences.push(format!("The {trigger} event took place."));
        } else {
            let args: Vec<String> = filled
                .iter()
                .map(|(r, m)| {
                    let tag: String = r.chars().filter(|c| !c.is_whitespace()).collect();
                    format!("<{tag}{sfx}>{m}</{tag}{sfx}>")
                })
                .collect();
            sentences.push(format!("The {trigger} event involved {}.", args.join(", ")));
        }
        if let Some(m) = detached {
            sentences.push(detached_sentence(m));
        }
        if i == 0 && defects.hallucinate {
            sentences.push(hallucination_sentence(ev.first_none().unwrap(), &ev.trigger));
        }
    }
    sentences.join(" ")
}

/// Defects present in a previously generated tagged passage. Tags that
/// decoding added around recovered mentions are ignored.
pub fn observed_defects(target: &SimTarget, previous: &str) -> Defects {
    let SimTarget::Events(events) = target else {
        return Defects::default();
    };
    let Some(ev) = events.first() else {
        return Defects::default();
    };
    let sfx = if events.len() > 1 { "1" } else { "" };
    let filled = ev.filled();
    let plain = star_forge::codec::strip_tags(previous);
    let omit = filled.first().is_some_and(|(r, m)| {
        let tag: String = r.chars().filter(|c| !c.is_whitespace()).collect();
        !previous.contains(&format!("<{tag}{sfx}>{m}</{tag}{sfx}>"))
    });
    Defects {
        omit,
        hallucinate: ev
            .first_none()
            .is_some_and(|r| plain.contains(&hallucination_sentence(r, &ev.trigger))),
        detach: filled.get(1).is_some_and(|(_, m)| plain.contains(&detached_sentence(m))),
    }
}

/// Defects remaining after a revision guided by `feedback`: a defect is
/// repaired when the feedback names it.
pub fn repaired(target: &SimTarget, before: Defects, feedback: &str) -> Defects {
    let SimTarget::Events(events) = target else {
        return before;
    };
    let Some(ev) = events.first() else {
        return before;
    };
    let filled = ev.filled();
    let names = |m: &str| feedback.contains(&format!("'{m}'"));
    Defects {
        omit: before.omit && !filled.first().is_some_and(|(_, m)| names(m)),
        hallucinate: before.hallucinate
            && !ev
                .first_none()
                .is_some_and(|r| feedback.contains(&format!("hallucinated argument {r} "))),
        detach: before.detach
            && !filled
                .get(1)
                .is_some_and(|(_, m)| feedback.contains(&format!("so that '{m}' takes part"))),
    }
}

fn revision_parts(prompt: &str) -> (&str, &str) {
    let body = prompt.split("\n\nFeedback: ").collect::<Vec<_>>();
    let head = body[0];
    let feedback = body.get(1).copied().unwrap_or_default();
    let previous = head
        .rfind("\nPassage: ")
        .map(|i| &head[i + "\nPassage: ".len()..])
        .unwrap_or_default();
    (previous, feedback)
}

fn yes() -> String {
    "Yes, it is.".into()
}

fn no() -> String {
    "No, it is not.".into()
}

fn quoted(q: &str, nth: usize) -> Option<&str> {
    q.split('\'').nth(2 * nth + 1)
}

/// Answer to a reflection question about an untagged passage.
pub fn answer(passage: &str, question: &str) -> String {
    let verdict = if question.starts_with("Does '") && question.ends_with("appear in the passage?") {
        passage.contains(quoted(question, 0).unwrap_or("\u{0}"))
    } else if let Some(rest) = question.strip_prefix("Does the passage contain information about the ") {
        let role = rest.split(" of the event").next().unwrap_or_default();
        let trigger = quoted(question, 0).unwrap_or_default();
        return if passage.contains(&hallucination_sentence(role, trigger)) { yes() } else { no() };
    } else if question.contains("a participant or attribute of the event") {
        let m = quoted(question, 0).unwrap_or_default();
        passage.contains(m) && !passage.contains(&detached_sentence(m))
    } else if question.contains("argument describing the event") {
        passage.contains(quoted(question, 0).unwrap_or("\u{0}"))
    } else {
        true
    };
    if verdict {
        yes()
    } else {
        no()
    }
}

/// The simulated model: drafts passages with hash-selected defects,
/// answers reflection questions truthfully and repairs what feedback names.
pub fn respond(prompt: &str) -> String {
    if let Some(rest) = prompt.strip_prefix(REFLECTION_MARKER) {
        let passage = rest
            .split("\n\nPassage: ")
            .nth(1)
            .and_then(|s| s.split("\n\nQuestion: ").next())
            .unwrap_or_default();
        let question = rest.rsplit("\n\nQuestion: ").next().unwrap_or_default();
        return answer(passage, question);
    }
    let Some(target) = parse_target(prompt) else {
        return "1. alpha\n2. beta\n3. gamma".into();
    };
    if prompt.trim_end().ends_with(REVISION_MARKER) {
        let (previous, feedback) = revision_parts(prompt);
        let before = observed_defects(&target, previous);
        return render_passage(&target, repaired(&target, before, feedback));
    }
    render_passage(&target, initial_defects(prompt))
}

/// Like [`respond`], but revisions return the previous passage unchanged.
pub fn respond_stubborn(prompt: &str) -> String {
    if prompt.trim_end().ends_with(REVISION_MARKER) {
        return revision_parts(prompt).0.to_string();
    }
    respond(prompt)
}

/// Like [`respond`], but every revision trades the hallucination for an
/// omission or back, so the audit changes every round and never clears.
pub fn respond_oscillating(prompt: &str) -> String {
    if prompt.trim_end().ends_with(REVISION_MARKER) {
        let target = parse_target(prompt).expect("revision prompt carries a target");
        let before = observed_defects(&target, revision_parts(prompt).0);
        let next = if before.hallucinate {
            Defects {
                omit: true,
                ..Defects::default()
            }
        } else {
            Defects {
                hallucinate: true,
                ..Defects::default()
            }
        };
        return render_passage(&target, next);
    }
    respond(prompt)
}

/// In-process chat backend over a response function; counts calls.
pub struct SimBackend {
    respond: fn(&str) -> String,
    pub calls: AtomicUsize,
}

impl SimBackend {
    pub fn new(respond: fn(&str) -> String) -> Self {
        SimBackend {
            respond,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ChatBackend for SimBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = &request.messages.last().expect("one message").content;
        Ok(Completion {
            text: (self.respond)(prompt),
            response_id: request.request_hash(),
            recorded_at: "2026-01-01T00:00:00Z".into(),
        })
    }
}

// ------------------------------------------------------ entailment stub

/// Deterministic entailment judge that reads the same surface cues the
/// simulated model writes. It cannot see detached arguments.
pub struct StubEntailment;

impl EntailmentJudge for StubEntailment {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<Judgment, RefineError> {
        let entailed = if hypothesis == "Yes, it is." {
            let a = premise.trim().to_lowercase();
            let openers = [
                "yes", "yeah", "yep", "yup", "correct", "indeed", "it is", "that's right", "absolutely", "certainly",
                "definitely", "sure", "right", "true", "affirmative",
            ];
            let words: Vec<&str> = a.split(|c: char| !c.is_alphanumeric() && c != '\'').filter(|w| !w.is_empty()).collect();
            let negated = words
                .iter()
                .any(|w| ["no", "not", "maybe", "unsure", "might", "perhaps"].contains(w) || w.ends_with("n't"));
            openers.iter().any(|p| a.starts_with(p)) && !negated
        } else if let Some(rest) = hypothesis.strip_prefix("The passage mentions the ") {
            let role = rest.split(" of the event").next().unwrap_or_default();
            let trigger = quoted(hypothesis, 0).unwrap_or_default();
            premise.contains(&format!("The {role} of the {trigger} event"))
        } else if hypothesis.starts_with("The passage contains '") || hypothesis.contains("' is the ") {
            premise.contains(quoted(hypothesis, 0).unwrap_or("\u{0}"))
        } else {
            true
        };
        Ok(Judgment {
            entailed,
            score: if entailed { 0.97 } else { 0.03 },
        })
    }
}

// ------------------------------------------------------------ scenarios

use star_forge::dataset::DataInstance;
use star_forge::ontology::{load_ontology_file, Ontology};
use star_forge::pipeline::{GenerateOptions, RunConfig, Workspace};
use star_forge::prompt::{build_passage_prompt, Task};
use star_forge::refine::{Checkers, Strategy};
use star_forge::sampler::{EventSpec, TargetStructure};

pub const FIXTURE_TOKEN_VAR: &str = "STAR_FORGE_FIXTURE_TOKEN";

pub fn e2e_dir() -> PathBuf {
    fixtures().join("e2e")
}

/// The end-to-end run configuration, loaded from the fixture directory.
pub fn e2e_config() -> RunConfig {
    RunConfig::load(&e2e_dir().join("config.json")).expect("e2e config")
}

pub fn e2e_ontology() -> Ontology {
    load_ontology_file(&e2e_dir().join("ontology.json")).unwrap()
}

/// One event whose structure forbids an Adjudicator.
pub fn refine_case() -> (Ontology, TargetStructure, String, String) {
    let ontology = e2e_ontology();
    let y = TargetStructure::Events {
        events: vec![EventSpec {
            event_type: "Justice:Sue".into(),
            trigger: "sued".into(),
            args: [
                ("Plaintiff".to_string(), Some("Acme Corp".to_string())),
                ("Defendant".to_string(), Some("Peter Hale".to_string())),
                ("Adjudicator".to_string(), None),
            ]
            .into_iter()
            .collect(),
        }],
    };
    let prompt = build_passage_prompt(&y, &[], &ontology, Task::Ee).unwrap().rendered;
    let target = parse_target(&prompt).unwrap();
    let x0 = render_passage(
        &target,
        Defects {
            hallucinate: true,
            ..Defects::default()
        },
    );
    (ontology, y, x0, prompt)
}

pub const ABLATION_ORDER: [Strategy; 4] = [
    Strategy::NoCheck,
    Strategy::RuleBased,
    Strategy::ReflectEntailment,
    Strategy::ReflectLlm,
];

pub fn ablation_checkers() -> Checkers {
    Checkers {
        entailment: Some(Arc::new(StubEntailment)),
        ..Checkers::default()
    }
}

/// Generates the plan once without refinement, then refines those same
/// drafts under every other strategy. Returns one dataset per strategy in
/// [`ABLATION_ORDER`].
pub fn run_ablation(backend: &dyn ChatBackend) -> Vec<(Strategy, Vec<DataInstance>)> {
    let mut config = e2e_config();
    config.strategy = Strategy::NoCheck;
    let ws = Workspace::open(config, true).unwrap();
    let checkers = ablation_checkers();
    let plan = ws.plan().unwrap();
    let opts = GenerateOptions {
        workers: 4,
        dump_prompts: None,
        with_refine: false,
    };
    let drafts = ws.generate(&plan, backend, &checkers, &opts).unwrap();
    let mut out = vec![(Strategy::NoCheck, drafts.clone())];
    for strategy in &ABLATION_ORDER[1..] {
        let mut ws = ws.clone();
        ws.config.strategy = *strategy;
        out.push((*strategy, ws.refine_all(&drafts, backend, &checkers, 4).unwrap()));
    }
    out
}
