//! Tag-wrapped span codec.
//!
//! Annotated passages are rendered as inline tags, e.g.
//! `<Plaintiff>He</Plaintiff> threatened to <Trigger>sue</Trigger> the company.`,
//! and LLM output in that form is decoded back into character-offset spans.
//!
//! The grammar is flat: a tag is `<Name>` / `</Name>` where `Name` starts
//! with an ASCII letter and continues with letters, digits, `_` or `-`.
//! When a passage holds more than one event every tag carries the 1-based
//! event number as a suffix (`<Trigger2>`). All offsets are counted in
//! Unicode scalar values.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ontology::{role_tag, Ontology, OBJECT_TAG, SUBJECT_TAG, TRIGGER_TAG};
use crate::sampler::TargetStructure;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpanLabel {
    Trigger,
    Role(String),
}

impl SpanLabel {
    pub fn role(name: impl Into<String>) -> Self {
        SpanLabel::Role(name.into())
    }

    pub fn tag(&self) -> String {
        match self {
            SpanLabel::Trigger => TRIGGER_TAG.to_string(),
            SpanLabel::Role(r) => role_tag(r),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            SpanLabel::Trigger => TRIGGER_TAG,
            SpanLabel::Role(r) => r,
        }
    }
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SpanLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SpanLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == TRIGGER_TAG {
            SpanLabel::Trigger
        } else {
            SpanLabel::Role(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: SpanLabel,
    pub event_index: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, label: SpanLabel, event_index: usize) -> Self {
        Span {
            start,
            end,
            label,
            event_index,
        }
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// The covered text of `passage`.
    pub fn text(&self, passage: &str) -> String {
        passage
            .chars()
            .skip(self.start)
            .take(self.end.saturating_sub(self.start))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotatedPassage {
    pub text: String,
    pub spans: Vec<Span>,
}

impl AnnotatedPassage {
    pub fn new(text: impl Into<String>, spans: Vec<Span>) -> Self {
        AnnotatedPassage {
            text: text.into(),
            spans,
        }
    }

    pub fn span_for(&self, event_index: usize, label: &SpanLabel) -> Option<&Span> {
        self.spans
            .iter()
            .find(|s| s.event_index == event_index && &s.label == label)
    }

    /// Spans sorted by position, for order-insensitive comparison.
    pub fn sorted_spans(&self) -> Vec<Span> {
        let mut spans = self.spans.clone();
        spans.sort();
        spans
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("spans {first:?} and {second:?} overlap")]
    Overlap { first: Span, second: Span },
    #[error("span {span:?} is out of bounds for a passage of {len} characters")]
    OutOfBounds { span: Span, len: usize },
    #[error("annotated mention `{mention}` does not occur in the passage")]
    SpanMismatch { mention: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeIssueKind {
    UnclosedTag,
    UnknownLabel,
    NestedTag,
    DuplicateRole,
    UnassignedArgument,
    EmptySpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeIssue {
    pub kind: DecodeIssueKind,
    /// Character offset into the tagged input.
    pub location: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodeReport {
    pub passage: AnnotatedPassage,
    pub issues: Vec<DecodeIssue>,
    /// Non-fatal observations: recovered untagged mentions, ambiguous
    /// occurrences, mentions that differ from the expected structure.
    pub notes: Vec<String>,
}

impl DecodeReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Wraps every span of `a` in tags.
pub fn encode(a: &AnnotatedPassage) -> Result<String, CodecError> {
    let chars: Vec<char> = a.text.chars().collect();
    let mut spans = a.spans.clone();
    spans.sort_by_key(|s| (s.start, s.end));
    for s in &spans {
        if s.start >= s.end || s.end > chars.len() {
            return Err(CodecError::OutOfBounds {
                span: s.clone(),
                len: chars.len(),
            });
        }
    }
    // A flat tag stream cannot express overlap, whichever events are involved.
    for pair in spans.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(CodecError::Overlap {
                first: pair[0].clone(),
                second: pair[1].clone(),
            });
        }
    }
    let suffixed = spans.iter().any(|s| s.event_index > 0);
    let tag_of = |s: &Span| {
        if suffixed {
            format!("{}{}", s.label.tag(), s.event_index + 1)
        } else {
            s.label.tag()
        }
    };

    let mut out = String::with_capacity(a.text.len() + spans.len() * 24);
    let mut pos = 0;
    for s in &spans {
        out.extend(&chars[pos..s.start]);
        let tag = tag_of(s);
        out.push('<');
        out.push_str(&tag);
        out.push('>');
        out.extend(&chars[s.start..s.end]);
        out.push_str("</");
        out.push_str(&tag);
        out.push('>');
        pos = s.end;
    }
    out.extend(&chars[pos..]);
    Ok(out)
}

/// First case-sensitive occurrence of `mention` in `passage`, as character
/// offsets.
pub fn find_subsequence(mention: &str, passage: &str) -> Option<(usize, usize)> {
    if mention.is_empty() {
        return None;
    }
    let byte_start = passage.find(mention)?;
    let start = passage[..byte_start].chars().count();
    Some((start, start + mention.chars().count()))
}

fn count_occurrences(mention: &str, passage: &str) -> usize {
    if mention.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut from = 0;
    while let Some(i) = passage[from..].find(mention) {
        count += 1;
        // step one char past the match start to allow overlapping matches
        let step = passage[from + i..].chars().next().map_or(1, char::len_utf8);
        from += i + step;
    }
    count
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Marker {
    pub closing: bool,
    pub name: String,
    /// Length of the marker in chars.
    pub len: usize,
}

/// Tries to read a tag marker starting at `chars[i] == '<'`.
pub(crate) fn parse_marker(chars: &[char], i: usize) -> Option<Marker> {
    let mut j = i + 1;
    let closing = chars.get(j) == Some(&'/');
    if closing {
        j += 1;
    }
    let name_start = j;
    match chars.get(j) {
        Some(c) if c.is_ascii_alphabetic() => j += 1,
        _ => return None,
    }
    while let Some(&c) = chars.get(j) {
        if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
            j += 1;
        } else {
            break;
        }
    }
    if chars.get(j) != Some(&'>') {
        return None;
    }
    Some(Marker {
        closing,
        name: chars[name_start..j].iter().collect(),
        len: j + 1 - i,
    })
}

/// Removes every well-formed tag marker and leaves all other text untouched.
pub fn strip_tags(tagged: &str) -> String {
    let chars: Vec<char> = tagged.chars().collect();
    let mut out = String::with_capacity(tagged.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' {
            if let Some(m) = parse_marker(&chars, i) {
                i += m.len;
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    out
}

/// True if `text` contains anything the decoder would read as a tag marker.
pub fn contains_tag_marker(text: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    (0..chars.len()).any(|i| chars[i] == '<' && parse_marker(&chars, i).is_some())
}

/// A tag pair read from the input before event attribution.
#[derive(Debug)]
struct RawSpan {
    base: String,
    suffix: Option<usize>,
    start: usize,
    end: usize,
    location: usize,
}

/// Splits a tag name into its base label and optional event suffix, given
/// the set of known base labels.
fn split_label(name: &str, known: &[String]) -> Option<(String, Option<usize>)> {
    if known.iter().any(|k| k == name) {
        return Some((name.to_string(), None));
    }
    let base = name.trim_end_matches(|c: char| c.is_ascii_digit());
    if base.len() == name.len() || !known.iter().any(|k| k == base) {
        return None;
    }
    let n: usize = name[base.len()..].parse().ok()?;
    Some((base.to_string(), Some(n)))
}

/// Which role tag maps to which role name, per event of the expected
/// structure.
struct LabelSpace {
    known: Vec<String>,
    /// For each expected event: (tag, role name) pairs it accepts, trigger excluded.
    event_roles: Vec<Vec<(String, String)>>,
    relation: bool,
}

impl LabelSpace {
    fn new(expected: &TargetStructure, ontology: &Ontology) -> Self {
        match expected {
            TargetStructure::Relation { .. } => LabelSpace {
                known: vec![SUBJECT_TAG.to_string(), OBJECT_TAG.to_string()],
                event_roles: vec![vec![
                    (SUBJECT_TAG.to_string(), SUBJECT_TAG.to_string()),
                    (OBJECT_TAG.to_string(), OBJECT_TAG.to_string()),
                ]],
                relation: true,
            },
            TargetStructure::Events { events } => {
                let mut known = vec![TRIGGER_TAG.to_string()];
                for et in &ontology.event_types {
                    for r in &et.roles {
                        let tag = r.tag();
                        if !known.contains(&tag) {
                            known.push(tag);
                        }
                    }
                }
                let event_roles = events
                    .iter()
                    .map(|ev| match ontology.event_type(&ev.event_type) {
                        Ok(spec) => spec.roles.iter().map(|r| (r.tag(), r.role.clone())).collect(),
                        // fall back to the structure's own role names
                        Err(_) => ev.args.keys().map(|r| (role_tag(r), r.clone())).collect(),
                    })
                    .collect();
                LabelSpace {
                    known,
                    event_roles,
                    relation: false,
                }
            }
        }
    }

    fn role_name(&self, event: usize, tag: &str) -> Option<&str> {
        self.event_roles
            .get(event)?
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, r)| r.as_str())
    }
}

/// Decodes tagged text against the structure it was supposed to express.
///
/// Never fails: malformed input surfaces as issues and the returned passage
/// always satisfies the span invariants.
pub fn decode(tagged: &str, expected: &TargetStructure, ontology: &Ontology) -> DecodeReport {
    let labels = LabelSpace::new(expected, ontology);
    let chars: Vec<char> = tagged.chars().collect();
    let mut text = String::with_capacity(tagged.len());
    let mut plain_len = 0usize;
    let mut issues = Vec::new();
    let mut raw = Vec::new();

    let issue = |kind, location, detail: String| DecodeIssue {
        kind,
        location,
        detail,
    };

    // (tag name, base, suffix, plain start, input location)
    let mut open: Option<(String, String, Option<usize>, usize, usize)> = None;
    let mut displaced: Vec<String> = Vec::new();
    let mut open_unknown: Vec<String> = Vec::new();

    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' {
            if let Some(m) = parse_marker(&chars, i) {
                let location = i;
                i += m.len;
                let Some((base, suffix)) = split_label(&m.name, &labels.known) else {
                    if m.closing {
                        if let Some(pos) = open_unknown.iter().rposition(|n| *n == m.name) {
                            open_unknown.remove(pos);
                            continue;
                        }
                    } else {
                        open_unknown.push(m.name.clone());
                    }
                    issues.push(issue(
                        DecodeIssueKind::UnknownLabel,
                        location,
                        format!("unknown tag `{}` removed", m.name),
                    ));
                    continue;
                };
                if !m.closing {
                    if let Some((outer, ..)) = open.take() {
                        issues.push(issue(
                            DecodeIssueKind::NestedTag,
                            location,
                            format!("`{}` opened inside `{outer}`; inner tag kept", m.name),
                        ));
                        displaced.push(outer);
                    }
                    open = Some((m.name, base, suffix, plain_len, location));
                } else if open.as_ref().is_some_and(|o| o.0 == m.name) {
                    let (_, base, suffix, start, loc) = open.take().unwrap();
                    if start == plain_len {
                        issues.push(issue(
                            DecodeIssueKind::EmptySpan,
                            loc,
                            format!("`{}` wraps no text", m.name),
                        ));
                    } else {
                        raw.push(RawSpan {
                            base,
                            suffix,
                            start,
                            end: plain_len,
                            location: loc,
                        });
                    }
                } else if let Some(pos) = displaced.iter().rposition(|n| *n == m.name) {
                    displaced.remove(pos);
                } else {
                    issues.push(issue(
                        DecodeIssueKind::UnclosedTag,
                        location,
                        format!("closing `{}` without a matching opening tag", m.name),
                    ));
                }
                continue;
            }
        }
        text.push(chars[i]);
        plain_len += 1;
        i += 1;
    }
    if let Some((name, .., loc)) = open {
        issues.push(issue(
            DecodeIssueKind::UnclosedTag,
            loc,
            format!("`{name}` is never closed"),
        ));
    }

    let mut spans: Vec<Span> = Vec::new();
    let mut notes = Vec::new();
    let n_events = labels.event_roles.len();
    let plain: Vec<char> = text.chars().collect();
    let slice = |s: usize, e: usize| plain[s..e].iter().collect::<String>();

    // Triggers first so role attribution can look at trigger positions.
    let (triggers, roles): (Vec<RawSpan>, Vec<RawSpan>) =
        raw.into_iter().partition(|r| !labels.relation && r.base == TRIGGER_TAG);

    for r in triggers {
        let mention = slice(r.start, r.end);
        let target = match r.suffix {
            Some(n) if n >= 1 && n <= n_events => Some(n - 1),
            Some(_) => None,
            None => {
                let free = |i: &usize| spans.iter().all(|s| !(s.event_index == *i && s.label == SpanLabel::Trigger));
                let by_text = match expected {
                    TargetStructure::Events { events } => {
                        (0..n_events).filter(free).find(|&i| events[i].trigger == mention)
                    }
                    _ => None,
                };
                by_text.or_else(|| (0..n_events).find(free))
            }
        };
        let Some(idx) = target else {
            issues.push(issue(
                DecodeIssueKind::UnassignedArgument,
                r.location,
                format!("trigger `{mention}` matches no expected event"),
            ));
            continue;
        };
        if spans.iter().any(|s| s.event_index == idx && s.label == SpanLabel::Trigger) {
            issues.push(issue(
                DecodeIssueKind::DuplicateRole,
                r.location,
                format!("second trigger for event {}", idx + 1),
            ));
            continue;
        }
        spans.push(Span::new(r.start, r.end, SpanLabel::Trigger, idx));
    }

    let trigger_pos: Vec<(usize, usize)> = spans.iter().map(|s| (s.event_index, s.start)).collect();
    for r in roles {
        let mention = slice(r.start, r.end);
        let idx = match r.suffix {
            Some(n) if n >= 1 && n <= n_events => {
                labels.role_name(n - 1, &r.base).map(|_| n - 1)
            }
            Some(_) => None,
            None => {
                let candidates: Vec<usize> = (0..n_events)
                    .filter(|&i| labels.role_name(i, &r.base).is_some())
                    .collect();
                let positioned: Vec<(usize, usize)> = trigger_pos
                    .iter()
                    .copied()
                    .filter(|(i, _)| candidates.contains(i))
                    .collect();
                let preceding = positioned
                    .iter()
                    .filter(|(_, p)| *p < r.start)
                    .max_by_key(|(_, p)| *p)
                    .map(|(i, _)| *i);
                let following = positioned
                    .iter()
                    .filter(|(_, p)| *p > r.start)
                    .min_by_key(|(_, p)| *p)
                    .map(|(i, _)| *i);
                preceding.or(following).or(candidates.first().copied())
            }
        };
        let Some(idx) = idx else {
            issues.push(issue(
                DecodeIssueKind::UnassignedArgument,
                r.location,
                format!("`{}` span `{mention}` fits no expected event", r.base),
            ));
            continue;
        };
        let role = labels.role_name(idx, &r.base).unwrap().to_string();
        let label = SpanLabel::Role(role);
        if spans.iter().any(|s| s.event_index == idx && s.label == label) {
            issues.push(issue(
                DecodeIssueKind::DuplicateRole,
                r.location,
                format!("`{label}` tagged twice for event {}", idx + 1),
            ));
            continue;
        }
        spans.push(Span::new(r.start, r.end, label, idx));
    }

    // Compare against the expected structure and recover untagged mentions.
    for (idx, label, mention) in expected_mentions(expected) {
        match spans.iter().find(|s| s.event_index == idx && s.label == label) {
            Some(s) => {
                let got = slice(s.start, s.end);
                if got != mention {
                    notes.push(format!(
                        "event {} {label}: tagged `{got}` but expected `{mention}`",
                        idx + 1
                    ));
                }
            }
            None => {
                if let Some((start, end)) = find_subsequence(&mention, &text) {
                    let span = Span::new(start, end, label.clone(), idx);
                    if spans.iter().any(|s| s.overlaps(&span)) {
                        continue;
                    }
                    let occurrences = count_occurrences(&mention, &text);
                    if occurrences > 1 {
                        notes.push(format!(
                            "event {} {label}: untagged `{mention}` occurs {occurrences} times; first occurrence used",
                            idx + 1
                        ));
                    } else {
                        notes.push(format!(
                            "event {} {label}: recovered untagged `{mention}`",
                            idx + 1
                        ));
                    }
                    spans.push(span);
                }
            }
        }
    }

    spans.sort();
    DecodeReport {
        passage: AnnotatedPassage { text, spans },
        issues,
        notes,
    }
}

/// Every non-None mention of a structure as (event index, label, mention).
pub fn expected_mentions(y: &TargetStructure) -> Vec<(usize, SpanLabel, String)> {
    match y {
        TargetStructure::Events { events } => events
            .iter()
            .enumerate()
            .flat_map(|(i, ev)| {
                std::iter::once((i, SpanLabel::Trigger, ev.trigger.clone())).chain(
                    ev.args
                        .iter()
                        .filter_map(move |(role, m)| m.clone().map(|m| (i, SpanLabel::Role(role.clone()), m))),
                )
            })
            .collect(),
        TargetStructure::Relation { subject, object, .. } => vec![
            (0, SpanLabel::role(SUBJECT_TAG), subject.clone()),
            (0, SpanLabel::role(OBJECT_TAG), object.clone()),
        ],
    }
}
