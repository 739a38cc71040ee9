//! Instance persistence, token-level export and distribution statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::codec::{Span, SpanLabel};
use crate::ontology::{OBJECT_TAG, SUBJECT_TAG};
use crate::prompt::Task;
use crate::refine::{Dimension, QualityFlag, StopReason, Strategy};
use crate::sampler::{PlanItem, TargetStructure};

pub const SCHEMA_VERSION: u64 = 1;
const SCHEMA_KIND: &str = "star-forge-instances";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: schema version {found:?} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { path: PathBuf, found: Option<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub t: usize,
    pub stop_reason: StopReason,
    pub flags_remaining: Vec<QualityFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub k: usize,
    pub plan_item: PlanItem,
    pub prompt_hash: String,
    pub strategy: Strategy,
    pub trace_summary: TraceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInstance {
    pub id: String,
    pub task: Task,
    pub passage: String,
    pub structure: TargetStructure,
    pub spans: Vec<Span>,
    pub provenance: Provenance,
    /// RFC 3339.
    pub created_at: String,
}

impl DataInstance {
    pub fn is_flagged(&self) -> bool {
        !self.provenance.trace_summary.flags_remaining.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u64,
    kind: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a header line followed by one instance per line.
pub fn write_instances(path: &Path, instances: &[DataInstance]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: SCHEMA_KIND.into(),
    };
    let mut write_line = |v: String| writeln!(out, "{v}").map_err(io_err(path));
    write_line(serde_json::to_string(&header).expect("header serializes"))?;
    for inst in instances {
        write_line(serde_json::to_string(inst).expect("instance serializes"))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_instances(path: &Path) -> Result<Vec<DataInstance>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mismatch = |found| DatasetError::SchemaVersionMismatch {
        path: path.to_path_buf(),
        found,
    };
    let first = match lines.next() {
        Some((_, line)) => line.map_err(io_err(path))?,
        None => return Err(mismatch(None)),
    };
    let header: Value = serde_json::from_str(&first).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        line: 1,
        source,
    })?;
    match header.get("schema_version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        found => return Err(mismatch(found)),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub text: String,
    /// Character offsets into the passage.
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{2018}'..='\u{201F}' | '\u{2013}' | '\u{2014}' | '\u{2026}')
}

/// Whitespace split, then each leading and trailing punctuation character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let (mut lo, mut hi) = (start, i);
        let mut tail = Vec::new();
        while lo < hi && is_punct(chars[lo]) {
            tokens.push(make_token(&chars, lo, lo + 1));
            lo += 1;
        }
        while hi > lo && is_punct(chars[hi - 1]) {
            tail.push(make_token(&chars, hi - 1, hi));
            hi -= 1;
        }
        if lo < hi {
            tokens.push(make_token(&chars, lo, hi));
        }
        tokens.extend(tail.into_iter().rev());
    }
    tokens
}

fn make_token(chars: &[char], start: usize, end: usize) -> Token {
    Token {
        text: chars[start..end].iter().collect(),
        start,
        end,
    }
}

/// The passage with all whitespace removed; tokens concatenate to this.
pub fn without_whitespace(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Token range `[s, e)` covering exactly the characters of `span`.
pub fn span_to_tokens(tokens: &[Token], span: &Span) -> Option<(usize, usize)> {
    let s = tokens.iter().position(|t| t.start == span.start)?;
    let e = tokens.iter().position(|t| t.end == span.end)?;
    (s <= e).then_some((s, e + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExportSummary {
    pub written: usize,
    pub dropped_flagged: usize,
    /// (instance id, reason) for every instance left out for misalignment.
    pub skipped: Vec<(String, String)>,
}

/// Token-level record for one instance, or the reason it cannot be built.
/// Token ranges are `[start, end)`.
pub fn export_record(inst: &DataInstance) -> Result<Value, String> {
    let tokens = tokenize(&inst.passage);
    let range = |span: &Span| {
        span_to_tokens(&tokens, span).ok_or_else(|| {
            format!(
                "span {}..{} ({} of event {}) does not align with token boundaries",
                span.start,
                span.end,
                span.label,
                span.event_index + 1
            )
        })
    };
    let mut spans = inst.spans.clone();
    spans.sort();
    let token_texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    match &inst.structure {
        TargetStructure::Events { events } => {
            let mut out = Vec::with_capacity(events.len());
            for (i, ev) in events.iter().enumerate() {
                let trigger = spans
                    .iter()
                    .find(|s| s.event_index == i && s.label == SpanLabel::Trigger)
                    .ok_or_else(|| format!("event {} has no trigger span", i + 1))?;
                let (ts, te) = range(trigger)?;
                let mut args = Vec::new();
                for s in spans.iter().filter(|s| s.event_index == i && s.label != SpanLabel::Trigger) {
                    let (a, b) = range(s)?;
                    args.push(json!({ "role": s.label.as_str(), "span": [a, b] }));
                }
                out.push(json!({ "type": ev.event_type, "trigger": [ts, te], "args": args }));
            }
            Ok(json!({ "id": inst.id, "tokens": token_texts, "events": out }))
        }
        TargetStructure::Relation { relation, .. } => {
            let find = |tag: &str| {
                spans
                    .iter()
                    .find(|s| s.label == SpanLabel::role(tag))
                    .ok_or_else(|| format!("no {tag} span"))
                    .and_then(range)
            };
            let (ss, se) = find(SUBJECT_TAG)?;
            let (os, oe) = find(OBJECT_TAG)?;
            Ok(json!({
                "id": inst.id,
                "tokens": token_texts,
                "relations": [{ "type": relation, "subject": [ss, se], "object": [os, oe] }],
            }))
        }
    }
}

/// Writes one token-level record per exportable instance.
pub fn export_span_format(instances: &[DataInstance], path: &Path, drop_flagged: bool) -> Result<ExportSummary, DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut summary = ExportSummary {
        written: 0,
        dropped_flagged: 0,
        skipped: Vec::new(),
    };
    for inst in instances {
        if drop_flagged && inst.is_flagged() {
            summary.dropped_flagged += 1;
            continue;
        }
        match export_record(inst) {
            Ok(record) => {
                writeln!(out, "{record}").map_err(io_err(path))?;
                summary.written += 1;
            }
            Err(reason) => {
                log::warn!("skipping {}: {reason}", inst.id);
                summary.skipped.push((inst.id.clone(), reason));
            }
        }
    }
    out.flush().map_err(io_err(path))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DatasetStats {
    pub total: usize,
    /// Instances per primary event (or relation) type.
    pub per_type: BTreeMap<String, usize>,
    pub density: BTreeMap<usize, usize>,
    /// Keyed by the planned hallucination bin.
    pub hallucination: BTreeMap<String, usize>,
    pub density_per_type: BTreeMap<String, BTreeMap<usize, usize>>,
    pub hallucination_per_type: BTreeMap<String, BTreeMap<String, usize>>,
    /// Distinct trigger mentions per event type over all events.
    pub unique_triggers: BTreeMap<String, usize>,
    pub flagged_instances: usize,
    /// Fraction of instances with at least one remaining flag per dimension.
    pub remaining_flag_rate: BTreeMap<Dimension, f64>,
}

pub fn bin_key(bin: f64) -> String {
    format!("{bin}")
}

pub fn compute_stats(instances: &[DataInstance]) -> DatasetStats {
    let mut stats = DatasetStats {
        total: instances.len(),
        ..Default::default()
    };
    let mut triggers: BTreeMap<String, std::collections::BTreeSet<&str>> = BTreeMap::new();
    let mut flag_counts: BTreeMap<Dimension, usize> = BTreeMap::new();
    for inst in instances {
        let item = &inst.provenance.plan_item;
        let ty = item.primary_event_type.clone();
        let bin = bin_key(item.hallucination_bin);
        *stats.per_type.entry(ty.clone()).or_default() += 1;
        *stats.density.entry(item.density).or_default() += 1;
        *stats.hallucination.entry(bin.clone()).or_default() += 1;
        *stats.density_per_type.entry(ty.clone()).or_default().entry(item.density).or_default() += 1;
        *stats.hallucination_per_type.entry(ty).or_default().entry(bin).or_default() += 1;
        for ev in inst.structure.events() {
            triggers.entry(ev.event_type.clone()).or_default().insert(&ev.trigger);
        }
        let flags = &inst.provenance.trace_summary.flags_remaining;
        if !flags.is_empty() {
            stats.flagged_instances += 1;
        }
        let dims: std::collections::BTreeSet<Dimension> = flags.iter().map(|f| f.dimension).collect();
        for d in dims {
            *flag_counts.entry(d).or_default() += 1;
        }
    }
    stats.unique_triggers = triggers.into_iter().map(|(k, v)| (k, v.len())).collect();
    if stats.total > 0 {
        stats.remaining_flag_rate = flag_counts
            .into_iter()
            .map(|(d, n)| (d, n as f64 / stats.total as f64))
            .collect();
    }
    stats
}
