//! Quality-defect detection and iterative passage revision.
//!
//! Each round audits the current passage along a fixed set of quality
//! dimensions, renders one feedback sentence per flagged defect and asks the
//! backend for a revised passage. Only the passage is ever revised; the
//! target structure is fixed.

pub mod checkers;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkers::{
    AnswerChecker, Checkers, EntailmentAnswerChecker, EntailmentJudge, EntityRecognizer, Gazetteer,
    HttpEntailmentJudge, HttpPosTagger, Judgment, LexicalChecker, PosCheck, PosTagger, RecognizedEntity,
    CONFIRMATION,
};

use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::codec::{self, AnnotatedPassage, DecodeReport, SpanLabel};
use crate::ontology::{Ontology, OBJECT_TAG, SUBJECT_TAG, TRIGGER_TAG};
use crate::sampler::TargetStructure;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("strategy requires the {checker} checker, which is unavailable: {reason}")]
    CheckerUnavailable { checker: &'static str, reason: String },
    #[error("template for {dimension} needs `{field}`")]
    MissingField { dimension: Dimension, field: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimension {
    /// Mention is a verbatim subsequence of the passage.
    EE1,
    /// Trigger initiates an occurrence of its event type.
    EE2,
    /// Argument is a participant or attribute of its event.
    EE3,
    /// Argument serves its required role.
    EE4,
    /// Passage carries information for a role that must stay empty.
    EE5,
    /// Argument POS tags match the expected ones.
    EE6,
    /// Both entities are contained in the passage.
    RE1,
    /// Some relation holds between the entities.
    RE2,
    /// The relation that holds is the one in the structure.
    RE3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    #[serde(rename = "none", alias = "no-check")]
    NoCheck,
    RuleBased,
    ReflectEntailment,
    ReflectLlm,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NoCheck,
        Strategy::RuleBased,
        Strategy::ReflectEntailment,
        Strategy::ReflectLlm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::NoCheck => "none",
            Strategy::RuleBased => "rule-based",
            Strategy::ReflectEntailment => "reflect-entailment",
            Strategy::ReflectLlm => "reflect-llm",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .or((s == "no-check").then_some(Strategy::NoCheck))
            .ok_or_else(|| format!("unknown strategy `{s}` (expected none, rule-based, reflect-entailment or reflect-llm)"))
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Dimension {
    pub const EVENT: [Dimension; 6] = [
        Dimension::EE1,
        Dimension::EE2,
        Dimension::EE3,
        Dimension::EE4,
        Dimension::EE5,
        Dimension::EE6,
    ];
    pub const RELATION: [Dimension; 3] = [Dimension::RE1, Dimension::RE2, Dimension::RE3];

    pub fn question_template(self) -> &'static str {
        match self {
            Dimension::EE1 | Dimension::RE1 => "Does '{mention}' appear in the passage?",
            Dimension::EE2 => "Is '{trigger}' used to initiate an occurrence of a {event_type} event?",
            Dimension::EE3 => "Is '{mention}' a participant or attribute of the event triggered by '{trigger}'?",
            Dimension::EE4 => "Is '{mention}' a {role} argument describing the event triggered by '{trigger}'?",
            Dimension::EE5 => "Does the passage contain information about the {role} of the event triggered by '{trigger}'?",
            Dimension::EE6 => "Is '{mention}' used as a noun phrase in the passage?",
            Dimension::RE2 => "Is there a relation between '{subject}' and '{object}' in the passage?",
            Dimension::RE3 => "Does '{subject}' hold the relation {relation} with '{object}' in the passage?",
        }
    }

    /// Declarative form of the question, judged against the passage.
    pub fn statement_template(self) -> &'static str {
        match self {
            Dimension::EE1 | Dimension::RE1 => "The passage contains '{mention}'.",
            Dimension::EE2 => "'{trigger}' initiates an occurrence of a {event_type} event.",
            Dimension::EE3 => "'{mention}' is a participant or attribute of the event triggered by '{trigger}'.",
            Dimension::EE4 => "'{mention}' is the {role} of the event triggered by '{trigger}'.",
            Dimension::EE5 => "The passage mentions the {role} of the event triggered by '{trigger}'.",
            Dimension::EE6 => "'{mention}' is used as a noun phrase.",
            Dimension::RE2 => "There is a relation between '{subject}' and '{object}'.",
            Dimension::RE3 => "'{subject}' holds the relation {relation} with '{object}'.",
        }
    }

    pub fn feedback_template(self) -> &'static str {
        match self {
            Dimension::EE1 | Dimension::RE1 => {
                "The passage does not contain '{mention}', include '{mention}' verbatim in the passage."
            }
            Dimension::EE2 => {
                "The trigger '{trigger}' does not initiate an occurrence of {event_type} event, revise the passage so that '{trigger}' describes the {event_type} event."
            }
            Dimension::EE3 => {
                "The argument '{mention}' is not a participant or attribute of the event, revise the passage so that '{mention}' takes part in the event triggered by '{trigger}'."
            }
            Dimension::EE4 => {
                "The argument '{mention}' does not serve as {role}, revise the passage so that '{mention}' is the {role} of the event triggered by '{trigger}'."
            }
            Dimension::EE5 => {
                "The passage contains a hallucinated argument {role} incorrectly, remove {role} information for event triggered by '{trigger}'."
            }
            Dimension::EE6 => {
                "The argument '{mention}' is not used as a noun phrase, revise the passage so that '{mention}' is used as a noun phrase."
            }
            Dimension::RE2 => {
                "The passage does not express a relation between '{subject}' and '{object}', revise the passage so that the two entities are related."
            }
            Dimension::RE3 => {
                "The relation between '{subject}' and '{object}' is not {relation}, revise the passage so that it expresses the {relation} relation between them."
            }
        }
    }

    /// EE5 asks whether something that must be absent is present, so a
    /// confirmed answer is the defect. Every other dimension flags when the
    /// answer is not confirmed.
    pub fn flags_on_affirmative(self) -> bool {
        self == Dimension::EE5
    }

    pub fn checkable_by(self) -> &'static [Strategy] {
        use Strategy::*;
        match self {
            Dimension::EE1 | Dimension::EE4 | Dimension::EE6 | Dimension::RE1 => {
                &[RuleBased, ReflectEntailment, ReflectLlm]
            }
            _ => &[ReflectEntailment, ReflectLlm],
        }
    }
}

/// Values available to template placeholders.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotFields {
    pub event_type: Option<String>,
    pub trigger: Option<String>,
    pub role: Option<String>,
    pub mention: Option<String>,
    pub subject: Option<String>,
    pub object: Option<String>,
    pub relation: Option<String>,
}

impl SlotFields {
    fn get(&self, name: &str) -> Option<&str> {
        match name {
            "event_type" => self.event_type.as_deref(),
            "trigger" => self.trigger.as_deref(),
            "role" => self.role.as_deref(),
            "mention" => self.mention.as_deref(),
            "subject" => self.subject.as_deref(),
            "object" => self.object.as_deref(),
            "relation" => self.relation.as_deref(),
            _ => None,
        }
    }

    /// Fields describing `slot` of event `event_index` in `y`.
    pub fn for_slot(y: &TargetStructure, event_index: usize, slot: &str) -> SlotFields {
        match y {
            TargetStructure::Events { events } => {
                let Some(ev) = events.get(event_index) else {
                    return SlotFields::default();
                };
                let mention = if slot == TRIGGER_TAG {
                    Some(ev.trigger.clone())
                } else {
                    ev.args.get(slot).cloned().flatten()
                };
                SlotFields {
                    event_type: Some(ev.event_type.clone()),
                    trigger: Some(ev.trigger.clone()),
                    role: (slot != TRIGGER_TAG).then(|| slot.to_string()),
                    mention,
                    ..Default::default()
                }
            }
            TargetStructure::Relation {
                subject,
                object,
                relation,
            } => SlotFields {
                mention: match slot {
                    SUBJECT_TAG => Some(subject.clone()),
                    OBJECT_TAG => Some(object.clone()),
                    _ => None,
                },
                subject: Some(subject.clone()),
                object: Some(object.clone()),
                relation: Some(relation.clone()),
                ..Default::default()
            },
        }
    }
}

fn fill(template: &str, dim: Dimension, fields: &SlotFields) -> Result<String, RefineError> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').map(|c| open + c).expect("templates are well formed");
        let name = &rest[open + 1..close];
        let value = fields.get(name).ok_or_else(|| RefineError::MissingField {
            dimension: dim,
            field: name.to_string(),
        })?;
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn build_reflection_question(dim: Dimension, fields: &SlotFields) -> Result<String, RefineError> {
    fill(dim.question_template(), dim, fields)
}

pub fn build_statement(dim: Dimension, fields: &SlotFields) -> Result<String, RefineError> {
    fill(dim.statement_template(), dim, fields)
}

pub fn build_feedback_sentence(dim: Dimension, fields: &SlotFields) -> Result<String, RefineError> {
    fill(dim.feedback_template(), dim, fields)
}

/// `answer` entails the confirmative phrase according to `checker`.
pub fn standardize_response(answer: &str, checker: &dyn AnswerChecker) -> Result<bool, RefineError> {
    checker.affirms(answer)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QualityFlag {
    pub event_index: usize,
    pub dimension: Dimension,
    /// `Trigger`, a role name, or `Subject` / `Object` / `Relation`.
    pub slot: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mention: Option<String>,
    pub detail: String,
}

impl QualityFlag {
    fn key(&self) -> (usize, Dimension, &str) {
        (self.event_index, self.dimension, &self.slot)
    }
}

/// Sorts by (event, dimension, slot) and keeps one flag per key.
pub fn dedup_flags(mut flags: Vec<QualityFlag>) -> Vec<QualityFlag> {
    flags.sort();
    flags.dedup_by(|a, b| a.key() == b.key());
    flags
}

fn same_flag_set(a: &[QualityFlag], b: &[QualityFlag]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.key() == y.key())
}

/// One feedback sentence per flag, ordered by (event, dimension).
pub fn render_feedback(flags: &[QualityFlag], y: &TargetStructure) -> String {
    let mut sorted: Vec<&QualityFlag> = flags.iter().collect();
    sorted.sort();
    sorted
        .iter()
        .map(|f| {
            let mut fields = SlotFields::for_slot(y, f.event_index, &f.slot);
            if fields.mention.is_none() {
                fields.mention = f.mention.clone();
            }
            build_feedback_sentence(f.dimension, &fields).unwrap_or_else(|_| f.detail.clone())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One check to perform: a dimension applied to one slot of one event.
#[derive(Debug, Clone)]
struct Probe {
    dim: Dimension,
    event_index: usize,
    slot: String,
    fields: SlotFields,
}

impl Probe {
    fn flag(&self, detail: impl Into<String>) -> QualityFlag {
        QualityFlag {
            event_index: self.event_index,
            dimension: self.dim,
            slot: self.slot.clone(),
            mention: self.fields.mention.clone(),
            detail: detail.into(),
        }
    }
}

/// Every applicable (dimension, event, slot) of `y`: EE1 per mention, EE2
/// per trigger, EE3 and EE4 per argument, EE5 per empty role; RE1 per
/// entity, RE2 and RE3 once.
fn probes(y: &TargetStructure) -> Vec<Probe> {
    let mut out = Vec::new();
    let mut push = |dim, event_index, slot: &str| {
        out.push(Probe {
            dim,
            event_index,
            slot: slot.to_string(),
            fields: SlotFields::for_slot(y, event_index, slot),
        })
    };
    match y {
        TargetStructure::Events { events } => {
            for (i, ev) in events.iter().enumerate() {
                push(Dimension::EE1, i, TRIGGER_TAG);
                push(Dimension::EE2, i, TRIGGER_TAG);
                for (role, mention) in &ev.args {
                    if mention.is_some() {
                        push(Dimension::EE1, i, role);
                        push(Dimension::EE3, i, role);
                        push(Dimension::EE4, i, role);
                    } else {
                        push(Dimension::EE5, i, role);
                    }
                }
            }
        }
        TargetStructure::Relation { .. } => {
            push(Dimension::RE1, 0, SUBJECT_TAG);
            push(Dimension::RE1, 0, OBJECT_TAG);
            push(Dimension::RE2, 0, "Relation");
            push(Dimension::RE3, 0, "Relation");
        }
    }
    out
}

/// Everything an audit may consult.
pub struct Reflector<'a> {
    pub ontology: &'a Ontology,
    pub backend: &'a dyn ChatBackend,
    pub checkers: &'a Checkers,
    pub model_id: String,
    pub max_tokens: u32,
    /// Seed attached to every request made for this instance.
    pub seed: Option<u64>,
}

/// Chat prompt for one reflection question about `passage`.
pub fn reflection_prompt(passage: &str, question: &str) -> String {
    format!("Read the passage and answer the question.\n\nPassage: {passage}\n\nQuestion: {question}")
}

impl Reflector<'_> {
    fn ask(&self, passage: &str, question: &str) -> Result<String, RefineError> {
        let request = ChatRequest::prompt(&self.model_id, reflection_prompt(passage, question), 0.0, self.max_tokens)
            .with_seed(self.seed);
        Ok(self.backend.complete(&request)?.text)
    }

    fn mention_span(&self, passage: &AnnotatedPassage, probe: &Probe) -> Option<(usize, usize)> {
        let label = if probe.slot == TRIGGER_TAG {
            SpanLabel::Trigger
        } else {
            SpanLabel::role(&probe.slot)
        };
        passage
            .span_for(probe.event_index, &label)
            .map(|s| (s.start, s.end))
            .or_else(|| codec::find_subsequence(probe.fields.mention.as_deref()?, &passage.text))
    }

    fn rule_checks(&self, y: &TargetStructure, passage: &AnnotatedPassage, probes: &[Probe]) -> Result<Vec<QualityFlag>, RefineError> {
        let mut flags = Vec::new();
        let entities = match &self.checkers.recognizer {
            Some(r) => Some(r.recognize(&passage.text)?),
            None => None,
        };
        for p in probes {
            match p.dim {
                Dimension::EE1 | Dimension::RE1 => {
                    let mention = p.fields.mention.as_deref().unwrap_or_default();
                    if codec::find_subsequence(mention, &passage.text).is_none() {
                        flags.push(p.flag(format!("'{mention}' is not a subsequence of the passage")));
                    }
                }
                Dimension::EE4 => {
                    let (Some(entities), TargetStructure::Events { events }) = (&entities, y) else {
                        continue;
                    };
                    let Some((start, end)) = self.mention_span(passage, p) else {
                        continue;
                    };
                    let allowed = self
                        .ontology
                        .event_type(&events[p.event_index].event_type)
                        .ok()
                        .and_then(|t| t.role(&p.slot))
                        .map(|r| r.allowed_entity_types.clone())
                        .unwrap_or_default();
                    let overlapping: Vec<&RecognizedEntity> =
                        entities.iter().filter(|e| e.start < end && start < e.end).collect();
                    if !overlapping.is_empty() && !overlapping.iter().any(|e| allowed.contains(&e.entity_type)) {
                        flags.push(p.flag(format!(
                            "recognized as {}, expected one of {}",
                            overlapping[0].entity_type,
                            allowed.join(", ")
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(flags)
    }

    fn pos_checks(&self, passage: &AnnotatedPassage, probes: &[Probe]) -> Result<Vec<QualityFlag>, RefineError> {
        let Some(pos) = &self.checkers.pos else {
            return Ok(Vec::new());
        };
        let arg_probes: Vec<&Probe> = probes
            .iter()
            .filter(|p| p.dim == Dimension::EE3)
            .collect();
        if arg_probes.is_empty() {
            return Ok(Vec::new());
        }
        let (tokens, tags) = pos.tagger.tag(&passage.text)?;
        let mut flags = Vec::new();
        for p in arg_probes {
            let Some((start, end)) = self.mention_span(passage, p) else {
                continue;
            };
            match PosCheck::tags_for(&tokens, &tags, &passage.text, start, end) {
                Some(found) if !found.is_empty() && !pos.matches(&found) => {
                    let mut flag = p.flag(format!("tagged {}", found.join(" ")));
                    flag.dimension = Dimension::EE6;
                    flags.push(flag);
                }
                Some(_) => {}
                None => log::debug!("pos tokens do not align with the passage; skipping EE6"),
            }
        }
        Ok(flags)
    }

    fn judge_all<F>(&self, probes: &[Probe], template: fn(Dimension, &SlotFields) -> Result<String, RefineError>, verdict: F) -> Result<Vec<QualityFlag>, RefineError>
    where
        F: Fn(&str) -> Result<(bool, String), RefineError> + Sync,
    {
        let texts = probes
            .iter()
            .map(|p| template(p.dim, &p.fields))
            .collect::<Result<Vec<_>, _>>()?;
        let unique: Vec<&String> = texts.iter().collect::<BTreeSet<_>>().into_iter().collect();
        let verdicts = unique
            .par_iter()
            .map(|t| verdict(t).map(|v| ((*t).clone(), v)))
            .collect::<Result<std::collections::HashMap<_, _>, _>>()?;
        Ok(probes
            .iter()
            .zip(&texts)
            .filter_map(|(p, t)| {
                let (affirmed, detail) = &verdicts[t];
                (*affirmed == p.dim.flags_on_affirmative()).then(|| p.flag(detail.clone()))
            })
            .collect())
    }

    /// Flags for `passage` against `y` under `strategy`.
    pub fn identify_errors(&self, y: &TargetStructure, passage: &AnnotatedPassage, strategy: Strategy) -> Result<Vec<QualityFlag>, RefineError> {
        if strategy == Strategy::NoCheck {
            return Ok(Vec::new());
        }
        let probes = probes(y);
        let mut flags = match strategy {
            Strategy::NoCheck => unreachable!(),
            Strategy::RuleBased => self.rule_checks(y, passage, &probes)?,
            Strategy::ReflectEntailment => {
                let judge = self.checkers.entailment.as_ref().ok_or(RefineError::CheckerUnavailable {
                    checker: "entailment",
                    reason: "no entailment checker configured".into(),
                })?;
                self.judge_all(&probes, build_statement, |hypothesis| {
                    let j = judge.judge(&passage.text, hypothesis)?;
                    Ok((j.entailed, format!("entailed={} score={:.3}", j.entailed, j.score)))
                })?
            }
            Strategy::ReflectLlm => self.judge_all(&probes, build_reflection_question, |question| {
                let answer = self.ask(&passage.text, question)?;
                let affirmed = standardize_response(&answer, self.checkers.answer.as_ref())?;
                Ok((affirmed, format!("answer: {}", checkers::first_sentence(&answer).trim())))
            })?,
        };
        if !y.is_relation() {
            flags.extend(self.pos_checks(passage, &probes)?);
        }
        Ok(dedup_flags(flags))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Clean,
    MaxIterations,
    NoProgress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// Tagged passages X0..Xt as returned by the backend.
    pub versions: Vec<String>,
    /// Audit of each version; same length as `versions`.
    pub flags_per_iteration: Vec<Vec<QualityFlag>>,
    pub stop_reason: StopReason,
    pub t: usize,
}

impl RefinementTrace {
    pub fn final_flags(&self) -> &[QualityFlag] {
        self.flags_per_iteration.last().map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineSettings {
    pub strategy: Strategy,
    pub max_iterations: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RefineSettings {
    fn default() -> Self {
        RefineSettings {
            strategy: Strategy::NoCheck,
            max_iterations: 3,
            temperature: 0.8,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub tagged: String,
    pub report: DecodeReport,
    pub trace: RefinementTrace,
    /// `recorded_at` of the last revision completion, if any was made.
    pub last_recorded_at: Option<String>,
}

/// A refinement that hit an error; `trace` holds the rounds completed.
#[derive(Debug, Error)]
#[error("refinement aborted after {} revision(s): {error}", trace.t)]
pub struct RefineAbort {
    #[source]
    pub error: RefineError,
    pub trace: RefinementTrace,
}

/// Generation prompt, previous passage and feedback for one revision.
pub fn build_revision_prompt(generation_prompt: &str, previous: &str, feedback: &str) -> String {
    format!(
        "{generation_prompt} {previous}\n\nFeedback: {feedback}\n\n\
         Rewrite the passage so that every point of the feedback is addressed. \
         Keep the tag conventions and output only the revised passage.\nRevised passage:"
    )
}

/// Strips a leading passage label and surrounding whitespace from a
/// completion.
pub fn clean_completion(text: &str) -> String {
    let mut t = text.trim();
    for prefix in ["Revised passage:", "Passage:"] {
        if let Some(rest) = t.strip_prefix(prefix) {
            t = rest.trim_start();
        }
    }
    t.trim().to_string()
}

/// Runs the audit/revise loop from `x0` until the audit is clean, the
/// flags stop changing, or `max_iterations` revisions have been made.
pub fn refine(
    y: &TargetStructure,
    x0: &str,
    generation_prompt: &str,
    reflector: &Reflector<'_>,
    settings: &RefineSettings,
) -> Result<Refined, RefineAbort> {
    let mut trace = RefinementTrace {
        versions: vec![x0.to_string()],
        flags_per_iteration: Vec::new(),
        stop_reason: StopReason::Clean,
        t: 0,
    };
    let mut tagged = x0.to_string();
    let mut report = codec::decode(&tagged, y, reflector.ontology);
    let mut last_recorded_at = None;
    let abort = |error: RefineError, trace: &RefinementTrace| RefineAbort {
        error,
        trace: trace.clone(),
    };

    loop {
        let flags = match reflector.identify_errors(y, &report.passage, settings.strategy) {
            Ok(f) => f,
            Err(e) => return Err(abort(e, &trace)),
        };
        let previous = trace.flags_per_iteration.last().cloned();
        trace.flags_per_iteration.push(flags.clone());
        if flags.is_empty() {
            trace.stop_reason = StopReason::Clean;
            break;
        }
        if previous.is_some_and(|p| same_flag_set(&p, &flags)) {
            trace.stop_reason = StopReason::NoProgress;
            break;
        }
        if trace.t >= settings.max_iterations {
            trace.stop_reason = StopReason::MaxIterations;
            break;
        }
        let prompt = build_revision_prompt(generation_prompt, &tagged, &render_feedback(&flags, y));
        let request = ChatRequest::prompt(&reflector.model_id, prompt, settings.temperature, settings.max_tokens)
            .with_seed(reflector.seed);
        let completion = match reflector.backend.complete(&request) {
            Ok(c) => c,
            Err(e) => return Err(abort(e.into(), &trace)),
        };
        tagged = clean_completion(&completion.text);
        last_recorded_at = Some(completion.recorded_at);
        report = codec::decode(&tagged, y, reflector.ontology);
        trace.versions.push(tagged.clone());
        trace.t += 1;
    }
    log::debug!("refine stopped after {} revision(s): {:?}", trace.t, trace.stop_reason);
    Ok(Refined {
        tagged,
        report,
        trace,
        last_recorded_at,
    })
}
