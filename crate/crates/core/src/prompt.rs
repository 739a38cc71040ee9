//! Passage-generation prompts.
//!
//! A prompt is assembled from four kinds of segment, always in this order:
//! the task-level instruction, one type-level instruction per distinct type
//! in the target, the verbalized demonstrations, and the verbalized target
//! structure with an open passage slot.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::sha256_hex;
use crate::codec::{self, AnnotatedPassage};
use crate::ontology::{EventTypeSpec, Ontology, OntologyError, RelationTypeSpec};
use crate::pools::SeedDemonstration;
use crate::sampler::TargetStructure;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("demonstration `{source_id}` does not match its passage: {detail}")]
    SpanMismatch { source_id: String, detail: String },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    #[serde(alias = "EE")]
    Ee,
    #[serde(alias = "RE")]
    Re,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ee => "ee",
            Task::Re => "re",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    TaskInstruction,
    TypeInstruction,
    Demonstration,
    TargetVerbalization,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub segments: Vec<(SegmentKind, String)>,
    pub rendered: String,
    pub content_hash: String,
}

impl PromptBundle {
    pub fn from_segments(segments: Vec<(SegmentKind, String)>) -> Self {
        let rendered = segments
            .iter()
            .map(|(_, t)| t.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        let content_hash = sha256_hex(rendered.as_bytes());
        PromptBundle {
            segments,
            rendered,
            content_hash,
        }
    }

    pub fn count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|(k, _)| *k == kind).count()
    }
}

const EE_INSTRUCTION: &str = "\
Task: write a passage that expresses the given event structure.

An event is a specific occurrence involving participants, often described as a change of state. \
A trigger is the word or phrase that most clearly expresses the occurrence of an event. \
Participant arguments are the entities that take part in an event, such as the agent or the victim. \
Attribute arguments describe properties of an event, such as its time, place or instrument.

Your goal is to generate a passage that contains the given trigger words and argument mentions verbatim, \
so that each trigger expresses its event and each argument mention fills its argument role. \
Wrap every trigger in <Trigger></Trigger> tags and every argument mention in tags named after its role, \
for example: <Plaintiff>He</Plaintiff> threatened to <Trigger>sue</Trigger> the company.

If an argument is given as None, do not generate any information for arguments of that role in the passage.

If more than one event is given, all of the events must be contained in one single passage. \
In that case append the event number to every tag, for example <Trigger2></Trigger2> for the trigger of the second event. \
If the number of events is 0, write a passage that describes none of the given event types.";

const RE_INSTRUCTION: &str = "\
Task: write a passage that expresses the given relation between two entities.

A relation is a semantic connection that holds between two entities mentioned in a text: \
the subject entity and the object entity.

Your goal is to generate a passage that contains the given subject and object mentions verbatim \
and clearly states that the given relation holds between them. \
Wrap the subject in <Subject></Subject> tags and the object in <Object></Object> tags.

Do not state any relation between the two entities other than the one given.

Both entities must be contained in one single passage.";

pub fn render_task_instruction(task: Task) -> &'static str {
    match task {
        Task::Ee => EE_INSTRUCTION,
        Task::Re => RE_INSTRUCTION,
    }
}

/// Type name, definition and every role with its definition.
pub fn render_event_type_instruction(spec: &EventTypeSpec) -> String {
    let mut out = format!("Event type: {}\nDefinition: {}", spec.name, spec.definition);
    if !spec.roles.is_empty() {
        out.push_str("\nArgument roles:");
        for role in &spec.roles {
            out.push_str(&format!("\n- {}: {}", role.role, role.definition));
        }
    }
    out
}

pub fn render_relation_type_instruction(spec: &RelationTypeSpec) -> String {
    let mut out = format!("Relation type: {}\nDefinition: {}", spec.name, spec.definition);
    if let Some(types) = &spec.subject_types {
        out.push_str(&format!("\nSubject entity types: {}", types.join(", ")));
    }
    if let Some(types) = &spec.object_types {
        out.push_str(&format!("\nObject entity types: {}", types.join(", ")));
    }
    out
}

/// The three verbalizer segments of one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalization {
    pub count: String,
    pub structure: String,
    /// Tagged passage for demonstrations; `None` leaves the slot open.
    pub tagged_passage: Option<String>,
}

impl Verbalization {
    pub fn render(&self) -> String {
        let mut out = self.count.clone();
        if !self.structure.is_empty() {
            out.push('\n');
            out.push_str(&self.structure);
        }
        out.push_str("\nPassage:");
        if let Some(p) = &self.tagged_passage {
            out.push(' ');
            out.push_str(p);
        }
        out
    }
}

fn verbalize_structure(y: &TargetStructure) -> (String, String) {
    match y {
        TargetStructure::Events { events } => {
            let lines: Vec<String> = events
                .iter()
                .enumerate()
                .map(|(i, ev)| {
                    let mut line = format!("Event {}: type={}, trigger={}", i + 1, ev.event_type, ev.trigger);
                    for (role, value) in &ev.args {
                        line.push_str(&format!(", {role}={}", value.as_deref().unwrap_or("None")));
                    }
                    line
                })
                .collect();
            (format!("Number of events: {}", events.len()), lines.join("\n"))
        }
        TargetStructure::Relation {
            subject,
            object,
            relation,
        } => (
            "Number of relations: 1".to_string(),
            format!("Subject: {subject}\nObject: {object}\nRelation: {relation}"),
        ),
    }
}

/// Verbalizes a structure, with its tagged passage when one is given.
pub fn verbalize_instance(
    y: &TargetStructure,
    passage: Option<&AnnotatedPassage>,
    source_id: &str,
) -> Result<Verbalization, PromptError> {
    let (count, structure) = verbalize_structure(y);
    let mismatch = |detail: String| PromptError::SpanMismatch {
        source_id: source_id.to_string(),
        detail,
    };
    let tagged_passage = match passage {
        None => None,
        Some(p) => {
            for (idx, label, mention) in codec::expected_mentions(y) {
                let span = p
                    .span_for(idx, &label)
                    .ok_or_else(|| mismatch(format!("no span for event {} {label} `{mention}`", idx + 1)))?;
                let got = span.text(&p.text);
                if got != mention {
                    return Err(mismatch(format!("span covers `{got}`, structure says `{mention}`")));
                }
            }
            Some(codec::encode(p).map_err(|e| mismatch(e.to_string()))?)
        }
    };
    Ok(Verbalization {
        count,
        structure,
        tagged_passage,
    })
}

/// Picks the `k` demonstrations whose types overlap `y` most; ties go to
/// the smaller `source_id`.
pub fn select_demonstrations<'a>(
    seeds: &'a [SeedDemonstration],
    y: &TargetStructure,
    k: usize,
) -> Vec<&'a SeedDemonstration> {
    let wanted = y.distinct_types();
    let mut scored: Vec<(usize, &SeedDemonstration)> = seeds
        .iter()
        .filter(|s| s.structure.is_relation() == y.is_relation())
        .map(|s| {
            let overlap = s.event_types().iter().filter(|t| wanted.contains(t)).count();
            (overlap, s)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.source_id.cmp(&b.1.source_id)));
    scored.into_iter().take(k).map(|(_, s)| s).collect()
}

/// Assembles the full generation prompt for target `y`.
pub fn build_passage_prompt(
    y: &TargetStructure,
    demos: &[&SeedDemonstration],
    ontology: &Ontology,
    task: Task,
) -> Result<PromptBundle, PromptError> {
    build_passage_prompt_with_types(y, demos, ontology, task, &y.distinct_types())
}

/// As [`build_passage_prompt`], with the type instructions rendered for
/// `types` instead of the types present in `y`.
pub fn build_passage_prompt_with_types(
    y: &TargetStructure,
    demos: &[&SeedDemonstration],
    ontology: &Ontology,
    task: Task,
    types: &[&str],
) -> Result<PromptBundle, PromptError> {
    let mut segments = vec![(SegmentKind::TaskInstruction, render_task_instruction(task).to_string())];
    for &name in types {
        let text = match y {
            TargetStructure::Events { .. } => render_event_type_instruction(ontology.event_type(name)?),
            TargetStructure::Relation { .. } => render_relation_type_instruction(ontology.relation_type(name)?),
        };
        segments.push((SegmentKind::TypeInstruction, text));
    }
    for (i, demo) in demos.iter().enumerate() {
        let annotated = demo.annotated().map_err(|e| PromptError::SpanMismatch {
            source_id: demo.source_id.clone(),
            detail: e.to_string(),
        })?;
        let v = verbalize_instance(&demo.structure, Some(&annotated), &demo.source_id)?;
        segments.push((SegmentKind::Demonstration, format!("Example {}:\n{}", i + 1, v.render())));
    }
    let target = verbalize_instance(y, None, "target")?;
    segments.push((
        SegmentKind::TargetVerbalization,
        format!(
            "Now write the passage for the following structure.\n{}",
            target.render()
        ),
    ));
    Ok(PromptBundle::from_segments(segments))
}
