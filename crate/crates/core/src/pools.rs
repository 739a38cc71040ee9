//! Candidate pools of trigger, argument and entity mentions.
//!
//! Pools are filled by prompting the backend: trigger pools from tagged
//! seed passages, argument pools with one definition-driven question per
//! allowed entity type, and entity pools (RE) from seed entities. Results
//! are normalized, deduplicated and persisted as JSONL so later runs reuse
//! them.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatRequest};
use crate::codec::{self, AnnotatedPassage, CodecError, Span, SpanLabel};
use crate::ontology::{ArgumentRoleSpec, EventTypeSpec, Ontology, OntologyError, TRIGGER_TAG};
use crate::sampler::TargetStructure;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("entity type `{entity_type}` is not allowed for role `{role}`")]
    DisallowedEntityType { role: String, entity_type: String },
    #[error("cannot merge pools with different keys: {0} vs {1}")]
    KeyMismatch(PoolKey, PoolKey),
    #[error("nothing to merge")]
    NothingToMerge,
    #[error("target pool size must be at least 1")]
    InvalidTarget,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolKey {
    Trigger { event_type: String },
    Argument { event_type: String, role: String },
    Entity { entity_type: String },
}

impl fmt::Display for PoolKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolKey::Trigger { event_type } => write!(f, "trigger({event_type})"),
            PoolKey::Argument { event_type, role } => write!(f, "argument({event_type}, {role})"),
            PoolKey::Entity { entity_type } => write!(f, "entity({entity_type})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolProvenance {
    pub request_hash: String,
    pub response_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub key: PoolKey,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub provenance: Vec<PoolProvenance>,
    #[serde(default = "one")]
    pub target_size: usize,
    #[serde(default)]
    pub complete: bool,
}

fn one() -> usize {
    1
}

impl CandidatePool {
    pub fn empty(key: PoolKey, target_size: usize) -> Self {
        CandidatePool {
            key,
            candidates: Vec::new(),
            provenance: Vec::new(),
            target_size,
            complete: false,
        }
    }

    /// A hand-built pool; candidates are deduplicated.
    pub fn with_candidates(key: PoolKey, candidates: Vec<String>) -> Self {
        let mut pool = CandidatePool::empty(key, candidates.len().max(1));
        pool.extend(candidates, usize::MAX);
        pool.complete = true;
        pool
    }

    /// Appends candidates not yet present (after normalization), up to `cap`.
    /// Returns how many were added.
    pub fn extend(&mut self, candidates: impl IntoIterator<Item = String>, cap: usize) -> usize {
        let mut seen: HashSet<String> = self.candidates.iter().map(|c| normalize_mention(c)).collect();
        let before = self.candidates.len();
        for c in candidates {
            if self.candidates.len() >= cap {
                break;
            }
            let c = c.trim().to_string();
            if c.is_empty() {
                continue;
            }
            if seen.insert(normalize_mention(&c)) {
                self.candidates.push(c);
            }
        }
        self.candidates.len() - before
    }
}

/// Case-folded, whitespace-collapsed form used for deduplication.
pub fn normalize_mention(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// A collection of pools addressed by key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoolSet {
    pools: BTreeMap<PoolKey, CandidatePool>,
}

impl PoolSet {
    pub fn insert(&mut self, pool: CandidatePool) {
        self.pools.insert(pool.key.clone(), pool);
    }

    pub fn get(&self, key: &PoolKey) -> Option<&CandidatePool> {
        self.pools.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidatePool> {
        self.pools.values()
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    /// Whether `mention` is in the pool for `key`.
    pub fn contains(&self, key: &PoolKey, mention: &str) -> bool {
        self.get(key).is_some_and(|p| p.candidates.iter().any(|c| c == mention))
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for pool in self.pools.values() {
            serde_json::to_writer(&mut *out, pool)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, serde_json::Error> {
        let mut set = PoolSet::default();
        for line in input.lines() {
            let line = line.map_err(serde_json::Error::io)?;
            if line.trim().is_empty() {
                continue;
            }
            set.insert(serde_json::from_str(&line)?);
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let file = std::fs::File::open(path).map_err(|e| crate::Error::io(path, e))?;
        PoolSet::read_jsonl(std::io::BufReader::new(file)).map_err(|e| crate::Error::parse(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::Error> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| crate::Error::io(path, e))?);
        self.write_jsonl(&mut file)
            .and_then(|_| file.flush())
            .map_err(|e| crate::Error::io(path, e))
    }
}

impl FromIterator<CandidatePool> for PoolSet {
    fn from_iter<T: IntoIterator<Item = CandidatePool>>(iter: T) -> Self {
        let mut set = PoolSet::default();
        for p in iter {
            set.insert(p);
        }
        set
    }
}

/// A gold-annotated seed instance used as an in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedDemonstration {
    pub source_id: String,
    pub passage: String,
    pub structure: TargetStructure,
    /// Gold spans; when omitted they are resolved from the structure by
    /// first occurrence.
    #[serde(default)]
    pub spans: Vec<Span>,
    /// Entity type of each subject/object mention (RE seeds).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub entity_types: BTreeMap<String, String>,
}

impl SeedDemonstration {
    pub fn event_types(&self) -> Vec<&str> {
        self.structure.distinct_types()
    }

    /// The passage with its gold spans, checked against the text.
    pub fn annotated(&self) -> Result<AnnotatedPassage, CodecError> {
        let len = self.passage.chars().count();
        if !self.spans.is_empty() {
            for s in &self.spans {
                if s.start >= s.end || s.end > len {
                    return Err(CodecError::OutOfBounds { span: s.clone(), len });
                }
            }
            return Ok(AnnotatedPassage::new(self.passage.clone(), self.spans.clone()));
        }
        let mut spans = Vec::new();
        for (idx, label, mention) in codec::expected_mentions(&self.structure) {
            let (start, end) = codec::find_subsequence(&mention, &self.passage)
                .ok_or_else(|| CodecError::SpanMismatch { mention: mention.clone() })?;
            spans.push(Span::new(start, end, label, idx));
        }
        spans.sort();
        Ok(AnnotatedPassage::new(self.passage.clone(), spans))
    }

    /// The entities mentioned by an RE seed with their types, if known.
    pub fn entities(&self) -> Vec<(String, Option<String>)> {
        match &self.structure {
            TargetStructure::Relation { subject, object, .. } => [subject, object]
                .into_iter()
                .map(|m| (m.clone(), self.entity_types.get(m).cloned()))
                .collect(),
            TargetStructure::Events { .. } => Vec::new(),
        }
    }
}

pub fn read_seeds(path: &Path) -> Result<Vec<SeedDemonstration>, crate::Error> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| crate::Error::parse(path, e)))
        .collect()
}

/// Prompt asking for more passages of `event_type` with tagged triggers.
pub fn build_trigger_prompt(event_type: &EventTypeSpec, demos: &[SeedDemonstration]) -> String {
    let mut out = format!(
        "Event type: {}\nDefinition: {}\n\n",
        event_type.name, event_type.definition
    );
    let tagged: Vec<String> = demos
        .iter()
        .filter_map(|d| trigger_only_passage(d, &event_type.name))
        .collect();
    if tagged.is_empty() {
        out.push_str(&format!(
            "Write short passages that each describe a {name} event. Wrap the trigger word of each passage, \
             the word that most clearly expresses the event, in <Trigger></Trigger> tags. \
             Write one passage per line and use a different trigger word in each passage.",
            name = event_type.name
        ));
        return out;
    }
    out.push_str(&format!(
        "The following passages describe {} events. In each passage the trigger word, the word that most \
         clearly expresses the event, is wrapped in <Trigger></Trigger> tags.\n\n",
        event_type.name
    ));
    for (i, p) in tagged.iter().enumerate() {
        out.push_str(&format!("Passage {}: {p}\n", i + 1));
    }
    out.push_str(&format!(
        "\nContinue writing new passages that describe {} events, one passage per line, and wrap the trigger \
         word of each passage in <Trigger></Trigger> tags. Use a different trigger word in each passage.",
        event_type.name
    ));
    out
}

/// The demo passage with only the triggers of `event_type` tagged.
fn trigger_only_passage(demo: &SeedDemonstration, event_type: &str) -> Option<String> {
    let annotated = demo.annotated().ok()?;
    let events = demo.structure.events();
    let spans: Vec<Span> = annotated
        .spans
        .iter()
        .filter(|s| {
            s.label == SpanLabel::Trigger && events.get(s.event_index).is_some_and(|e| e.event_type == event_type)
        })
        .map(|s| Span::new(s.start, s.end, SpanLabel::Trigger, 0))
        .collect();
    if spans.is_empty() {
        return None;
    }
    codec::encode(&AnnotatedPassage::new(annotated.text, spans)).ok()
}

/// Extracts the contents of every well-formed `<Trigger>…</Trigger>` pair.
/// Malformed regions are skipped and described in the returned warnings.
pub fn parse_trigger_candidates(response: &str) -> (Vec<String>, Vec<String>) {
    let chars: Vec<char> = response.chars().collect();
    let mut found = Vec::new();
    let mut warnings = Vec::new();
    let mut open: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' {
            if let Some(m) = codec::parse_marker(&chars, i) {
                if m.name == TRIGGER_TAG {
                    if !m.closing {
                        if open.is_some() {
                            warnings.push(format!("unclosed <Trigger> before offset {i}"));
                        }
                        open = Some(i + m.len);
                    } else if let Some(start) = open.take() {
                        let inner: String = chars[start..i].iter().collect();
                        let inner = codec::strip_tags(&inner).trim().to_string();
                        if inner.is_empty() {
                            warnings.push(format!("empty <Trigger> at offset {start}"));
                        } else {
                            found.push(inner);
                        }
                    } else {
                        warnings.push(format!("stray </Trigger> at offset {i}"));
                    }
                }
                i += m.len;
                continue;
            }
        }
        i += 1;
    }
    if let Some(start) = open {
        warnings.push(format!("unclosed <Trigger> at offset {start}"));
    }
    (found, warnings)
}

/// The argument-candidate question for one (event type, role, entity type).
pub fn build_argument_prompt(
    event_type: &EventTypeSpec,
    role: &ArgumentRoleSpec,
    entity_type: &str,
) -> Result<String, PoolError> {
    if !role.allowed_entity_types.iter().any(|t| t == entity_type) {
        return Err(PoolError::DisallowedEntityType {
            role: role.role.clone(),
            entity_type: entity_type.to_string(),
        });
    }
    Ok(format!(
        "Event type: {event}\nGiven the definition of {role} argument as '{definition}', what are some possible \
         {entity_type} names that can be used as {role}? Answer with a numbered list.",
        event = event_type.name,
        role = role.role,
        definition = role.definition,
    ))
}

/// Prompt asking for more entities of `entity_type`, seeded with examples.
pub fn build_entity_prompt(entity_type: &str, examples: &[String]) -> String {
    let mut out = String::new();
    if !examples.is_empty() {
        out.push_str(&format!(
            "Here are some examples of {entity_type} entities: {}.\n",
            examples.join(", ")
        ));
    }
    out.push_str(&format!(
        "What are some other possible {entity_type} names? Answer with a numbered list."
    ));
    out
}

fn strip_list_marker(line: &str) -> Option<&str> {
    for bullet in ['-', '*', '•'] {
        if let Some(rest) = line.strip_prefix(bullet) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest);
            }
        }
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    (rest.is_empty() || rest.starts_with(char::is_whitespace)).then_some(rest)
}

const QUOTES: &[char] = &['"', '\'', '“', '”', '‘', '’', '`'];

/// Extracts the items of numbered (`1.`, `2)`) and bulleted (`-`, `*`, `•`)
/// lines, in order.
pub fn parse_list_response(response: &str) -> Vec<String> {
    let mut items = Vec::new();
    for line in response.lines() {
        let Some(item) = strip_list_marker(line.trim()) else {
            continue;
        };
        let mut item = item.trim().replace("**", "");
        // drop trailing explanations such as "Truck: a large vehicle"
        for sep in [": ", " - ", " – ", " — "] {
            if let Some(i) = item.find(sep) {
                item.truncate(i);
            }
        }
        let item = item
            .trim()
            .trim_matches(QUOTES)
            .trim_end_matches(['.', ',', ';', ':', '!', '?'])
            .trim_matches(QUOTES)
            .trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    items
}

/// Union of pools that share one key, first-seen order.
pub fn merge_pools(pools: &[CandidatePool]) -> Result<CandidatePool, PoolError> {
    let first = pools.first().ok_or(PoolError::NothingToMerge)?;
    if let Some(other) = pools.iter().find(|p| p.key != first.key) {
        return Err(PoolError::KeyMismatch(first.key.clone(), other.key.clone()));
    }
    if pools.len() == 1 {
        return Ok(first.clone());
    }
    let target = pools.iter().map(|p| p.target_size).max().unwrap_or(1);
    let mut merged = CandidatePool::empty(first.key.clone(), target);
    for p in pools {
        merged.extend(p.candidates.iter().cloned(), usize::MAX);
        merged.provenance.extend(p.provenance.iter().cloned());
    }
    merged.complete = merged.candidates.len() >= target;
    Ok(merged)
}

/// Request settings and limits for pool filling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub trigger_target: usize,
    pub argument_target: usize,
    pub entity_target: usize,
    pub max_queries: usize,
    pub hard_cap: usize,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            model_id: "gpt-3.5-turbo".into(),
            temperature: 0.8,
            max_tokens: 1024,
            trigger_target: 100,
            argument_target: 50,
            entity_target: 100,
            max_queries: 10,
            hard_cap: 200,
        }
    }
}

impl PoolSettings {
    pub fn target_for(&self, key: &PoolKey) -> usize {
        match key {
            PoolKey::Trigger { .. } => self.trigger_target,
            PoolKey::Argument { .. } => self.argument_target,
            PoolKey::Entity { .. } => self.entity_target,
        }
    }
}

/// Fills pools by querying a backend.
pub struct PoolBuilder<'a, B: ChatBackend + ?Sized> {
    pub ontology: &'a Ontology,
    pub backend: &'a B,
    pub settings: PoolSettings,
}

impl<'a, B: ChatBackend + ?Sized> PoolBuilder<'a, B> {
    pub fn new(ontology: &'a Ontology, backend: &'a B, settings: PoolSettings) -> Self {
        PoolBuilder {
            ontology,
            backend,
            settings,
        }
    }

    fn ask(&self, prompt: String, pool: &mut CandidatePool) -> Result<String, BackendError> {
        let request = ChatRequest::prompt(
            self.settings.model_id.clone(),
            prompt,
            self.settings.temperature,
            self.settings.max_tokens,
        );
        let completion = self.backend.complete(&request)?;
        pool.provenance.push(PoolProvenance {
            request_hash: request.request_hash(),
            response_id: completion.response_id,
        });
        Ok(completion.text)
    }

    /// Queries until the pool reaches `target_size` distinct candidates or
    /// `max_queries` requests have been made.
    pub fn fill_pool(
        &self,
        key: &PoolKey,
        target_size: usize,
        max_queries: usize,
        demos: &[SeedDemonstration],
    ) -> Result<CandidatePool, PoolError> {
        if target_size == 0 {
            return Err(PoolError::InvalidTarget);
        }
        let cap = self.settings.hard_cap.max(target_size);
        match key {
            PoolKey::Trigger { event_type } => {
                let spec = self.ontology.event_type(event_type)?;
                let demos: Vec<SeedDemonstration> = demos
                    .iter()
                    .filter(|d| d.event_types().contains(&event_type.as_str()))
                    .cloned()
                    .collect();
                let base = build_trigger_prompt(spec, &demos);
                let mut pool = CandidatePool::empty(key.clone(), target_size);
                for _ in 0..max_queries {
                    if pool.candidates.len() >= target_size {
                        break;
                    }
                    let text = self.ask(with_exclusions(&base, &pool.candidates), &mut pool)?;
                    let (found, warnings) = parse_trigger_candidates(&text);
                    for w in warnings {
                        log::warn!("{key}: {w}");
                    }
                    pool.extend(found, cap);
                }
                pool.complete = pool.candidates.len() >= target_size;
                Ok(pool)
            }
            PoolKey::Argument { event_type, role } => {
                let spec = self.ontology.event_type(event_type)?;
                let role_spec = spec.role(role).ok_or_else(|| OntologyError::UnknownRole {
                    event_type: event_type.clone(),
                    role: role.clone(),
                })?;
                // one sub-pool per allowed entity type, queried round-robin
                let mut parts: Vec<CandidatePool> = role_spec
                    .allowed_entity_types
                    .iter()
                    .map(|_| CandidatePool::empty(key.clone(), target_size))
                    .collect();
                let mut merged = CandidatePool::empty(key.clone(), target_size);
                for q in 0..max_queries {
                    if merged.candidates.len() >= target_size {
                        break;
                    }
                    let slot = q % parts.len();
                    let entity_type = &role_spec.allowed_entity_types[slot];
                    let base = build_argument_prompt(spec, role_spec, entity_type)?;
                    let prompt = with_exclusions(&base, &parts[slot].candidates);
                    let text = self.ask(prompt, &mut parts[slot])?;
                    parts[slot].extend(parse_list_response(&text), cap);
                    merged = merge_pools(&parts)?;
                }
                merged.candidates.truncate(cap);
                merged.target_size = target_size;
                merged.complete = merged.candidates.len() >= target_size;
                Ok(merged)
            }
            PoolKey::Entity { entity_type } => {
                let examples = seed_entities(demos, entity_type, self.ontology);
                self.generate_entity_candidates(entity_type, &examples, target_size, max_queries)
            }
        }
    }

    /// Entity pool for RE, with seed entities as in-context examples.
    pub fn generate_entity_candidates(
        &self,
        entity_type: &str,
        examples: &[String],
        target_size: usize,
        max_queries: usize,
    ) -> Result<CandidatePool, PoolError> {
        if target_size == 0 {
            return Err(PoolError::InvalidTarget);
        }
        let key = PoolKey::Entity {
            entity_type: entity_type.to_string(),
        };
        let cap = self.settings.hard_cap.max(target_size);
        let base = build_entity_prompt(entity_type, examples);
        let mut pool = CandidatePool::empty(key, target_size);
        for _ in 0..max_queries {
            if pool.candidates.len() >= target_size {
                break;
            }
            let text = self.ask(with_exclusions(&base, &pool.candidates), &mut pool)?;
            pool.extend(parse_list_response(&text), cap);
        }
        pool.complete = pool.candidates.len() >= target_size;
        Ok(pool)
    }
}

/// Seed entities usable as examples for `entity_type`: typed entities that
/// match, plus untyped ones whose relation constrains the slot to that type
/// (or does not constrain it at all).
pub fn seed_entities(seeds: &[SeedDemonstration], entity_type: &str, ontology: &Ontology) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for seed in seeds {
        let TargetStructure::Relation {
            subject,
            object,
            relation,
        } = &seed.structure
        else {
            continue;
        };
        let spec = ontology.relation_type(relation).ok();
        let slots = [
            (subject, spec.and_then(|s| s.subject_types.as_ref())),
            (object, spec.and_then(|s| s.object_types.as_ref())),
        ];
        for (mention, constraint) in slots {
            let fits = match seed.entity_types.get(mention) {
                Some(t) => t == entity_type,
                None => constraint.is_none_or(|c| c.iter().any(|t| t == entity_type)),
            };
            if fits && seen.insert(normalize_mention(mention)) {
                out.push(mention.clone());
            }
        }
    }
    out
}

fn with_exclusions(base: &str, existing: &[String]) -> String {
    if existing.is_empty() {
        base.to_string()
    } else {
        format!("{base}\nDo not repeat any of these: {}.", existing.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Completion;
    use std::sync::Mutex;

    /// Answers with scripted responses in order and records prompts.
    struct Scripted {
        responses: Mutex<Vec<String>>,
        prompts: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(responses: &[&str]) -> Self {
            Scripted {
                responses: Mutex::new(responses.iter().rev().map(|s| s.to_string()).collect()),
                prompts: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatBackend for Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
            self.prompts.lock().unwrap().push(request.messages[0].content.clone());
            let text = self.responses.lock().unwrap().pop().unwrap_or_default();
            Ok(Completion {
                text,
                response_id: "id".into(),
                recorded_at: "t".into(),
            })
        }
    }

    fn ontology() -> Ontology {
        crate::ontology::load_ontology(
            br#"{"entity_types": ["PER", "ORG", "GPE", "LOC", "FAC", "VEH", "vehicle"],
            "event_types": [
              {"name": "Justice:Sue", "definition": "A legal action is initiated against someone.", "roles": [
                {"role": "Plaintiff", "definition": "The suing agent", "allowed_entity_types": ["PER", "ORG"]}]},
              {"name": "Life:Injure", "definition": "A person gets hurt.", "roles": [
                {"role": "Instrument", "definition": "The device used to inflict the harm", "allowed_entity_types": ["vehicle"]}]},
              {"name": "Movement:Transport", "definition": "Moving something.", "roles": [
                {"role": "Origin", "definition": "Where the transporting originated", "allowed_entity_types": ["GPE", "LOC", "FAC"]}]}
            ],
            "relation_types": [{"name": "org:founded_by", "definition": "d", "subject_types": ["ORG"], "object_types": ["PER"]}]}"#,
        )
        .unwrap()
    }

    fn sue_demo(id: &str, passage: &str, trigger: &str) -> SeedDemonstration {
        SeedDemonstration {
            source_id: id.into(),
            passage: passage.into(),
            structure: TargetStructure::Events {
                events: vec![crate::sampler::EventSpec {
                    event_type: "Justice:Sue".into(),
                    trigger: trigger.into(),
                    args: Default::default(),
                }],
            },
            spans: vec![],
            entity_types: Default::default(),
        }
    }

    #[test]
    fn trigger_prompt_wraps_demo_trigger() {
        let o = ontology();
        let prompt = build_trigger_prompt(
            o.event_type("Justice:Sue").unwrap(),
            &[sue_demo("s1", "He threatened to sue the company.", "sue")],
        );
        assert!(prompt.contains("He threatened to <Trigger>sue</Trigger> the company."));
        assert!(prompt.contains("A legal action is initiated against someone."));
        let zero = build_trigger_prompt(o.event_type("Justice:Sue").unwrap(), &[]);
        assert!(zero.contains("Definition: A legal action"));
        assert!(!zero.contains("Passage 1"));
    }

    #[test]
    fn trigger_candidates() {
        assert_eq!(parse_trigger_candidates("She decided to <Trigger>sue</Trigger> them.").0, vec!["sue"]);
        let (found, warnings) = parse_trigger_candidates("They <Trigger>fled");
        assert!(found.is_empty());
        assert_eq!(warnings.len(), 1);
    }

    /// Reference scanner: plain substring search for the tag pair.
    fn reference_scan(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut rest = text;
        while let Some(i) = rest.find("<Trigger>") {
            rest = &rest[i + "<Trigger>".len()..];
            let j = rest.find("</Trigger>").unwrap();
            out.push(rest[..j].trim().to_string());
            rest = &rest[j + "</Trigger>".len()..];
        }
        out
    }

    #[test]
    fn trigger_candidates_in_order() {
        let text = "1. They <Trigger>sued</Trigger> him.\n2. She will <Trigger>file suit</Trigger> today.\n\
                    3. The firm <Trigger>litigated</Trigger> for years.";
        let expected = reference_scan(text);
        assert_eq!(expected, ["sued", "file suit", "litigated"]);
        assert_eq!(parse_trigger_candidates(text).0, expected);
    }

    #[test]
    fn argument_prompt_wording() {
        let o = ontology();
        let et = o.event_type("Life:Injure").unwrap();
        let p = build_argument_prompt(et, et.role("Instrument").unwrap(), "vehicle").unwrap();
        assert!(p.contains(
            "Given the definition of Instrument argument as 'The device used to inflict the harm', \
             what are some possible vehicle names that can be used as Instrument?"
        ));
        assert!(matches!(
            build_argument_prompt(et, et.role("Instrument").unwrap(), "GPE"),
            Err(PoolError::DisallowedEntityType { .. })
        ));
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list_response("1. truck\n2. motorcycle\n3. bus"), ["truck", "motorcycle", "bus"]);
        assert_eq!(parse_list_response("- \"ambulance\"\n- taxi."), ["ambulance", "taxi"]);
        assert!(parse_list_response("Trucks and buses are common vehicles.").is_empty());
        assert_eq!(
            parse_list_response("Sure!\n1) **Tank**: armored\n* jeep\n• 'van'\n10. fire engine"),
            ["Tank", "jeep", "van", "fire engine"]
        );
        // a year is not a list marker
        assert!(parse_list_response("2003 was a year.").is_empty());
    }

    fn arg_pool(cands: &[&str]) -> CandidatePool {
        CandidatePool::with_candidates(
            PoolKey::Argument {
                event_type: "Movement:Transport".into(),
                role: "Origin".into(),
            },
            cands.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn merging() {
        let merged = merge_pools(&[arg_pool(&["Syria", "Iraq"]), arg_pool(&["iraq", "Baghdad"])]).unwrap();
        assert_eq!(merged.candidates, ["Syria", "Iraq", "Baghdad"]);
        let single = arg_pool(&["a", "b"]);
        assert_eq!(merge_pools(std::slice::from_ref(&single)).unwrap(), single);
        let other = CandidatePool::with_candidates(PoolKey::Trigger { event_type: "X".into() }, vec![]);
        assert!(matches!(merge_pools(&[single, other]), Err(PoolError::KeyMismatch(..))));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_mention("  New   York "), "new york");
        let mut p = arg_pool(&["New York"]);
        assert_eq!(p.extend(["new  york".to_string(), "".into(), "Boston".into()], 10), 1);
    }

    #[test]
    fn fill_counts_distinct_until_target() {
        let o = ontology();
        let backend = Scripted::new(&[
            "<Trigger>sue</Trigger> <Trigger>Sue</Trigger> <Trigger>litigate</Trigger>",
            "<Trigger>sue</Trigger> <Trigger>charge</Trigger> <Trigger>file</Trigger>",
            "<Trigger>indict</Trigger> <Trigger>accuse</Trigger> <Trigger>prosecute</Trigger>",
        ]);
        let builder = PoolBuilder::new(&o, &backend, PoolSettings::default());
        let key = PoolKey::Trigger {
            event_type: "Justice:Sue".into(),
        };
        let pool = builder.fill_pool(&key, 5, 10, &[]).unwrap();
        assert_eq!(pool.candidates.len(), 7);
        assert!(pool.complete);
        assert_eq!(pool.provenance.len(), 3);
        let prompts = backend.prompts.lock().unwrap();
        assert!(prompts[1].contains("Do not repeat any of these: sue, litigate."));

        let none = builder.fill_pool(&key, 5, 0, &[]).unwrap();
        assert!(none.candidates.is_empty());
        assert!(!none.complete);
    }

    #[test]
    fn fill_argument_rotates_entity_types() {
        let o = ontology();
        let backend = Scripted::new(&["1. Syria\n2. Iraq", "1. the desert", "1. the airport", "1. iraq\n2. Baghdad"]);
        let builder = PoolBuilder::new(&o, &backend, PoolSettings::default());
        let key = PoolKey::Argument {
            event_type: "Movement:Transport".into(),
            role: "Origin".into(),
        };
        let pool = builder.fill_pool(&key, 5, 4, &[]).unwrap();
        // merged per entity type, in ontology order
        assert_eq!(pool.candidates, ["Syria", "Iraq", "Baghdad", "the desert", "the airport"]);
        let prompts = backend.prompts.lock().unwrap();
        assert!(prompts[0].contains("possible GPE names"));
        assert!(prompts[1].contains("possible LOC names"));
        assert!(prompts[2].contains("possible FAC names"));
        assert!(prompts[3].contains("possible GPE names"));
    }

    #[test]
    fn entity_candidates_from_seeds() {
        let o = ontology();
        let seeds: Vec<SeedDemonstration> = [("Google", "Larry Page"), ("Microsoft", "Bill Gates")]
            .iter()
            .enumerate()
            .map(|(i, (s, ob))| SeedDemonstration {
                source_id: format!("r{i}"),
                passage: format!("{s} was founded by {ob}."),
                structure: TargetStructure::Relation {
                    subject: s.to_string(),
                    object: ob.to_string(),
                    relation: "org:founded_by".into(),
                },
                spans: vec![],
                entity_types: Default::default(),
            })
            .collect();
        let examples = seed_entities(&seeds, "ORG", &o);
        assert_eq!(examples, ["Google", "Microsoft"]);
        let backend = Scripted::new(&["1. Apple\n2. IBM", "1. apple\n2. Intel"]);
        let builder = PoolBuilder::new(&o, &backend, PoolSettings::default());
        let pool = builder
            .fill_pool(&PoolKey::Entity { entity_type: "ORG".into() }, 3, 5, &seeds)
            .unwrap();
        assert_eq!(pool.candidates, ["Apple", "IBM", "Intel"]);
        assert!(backend.prompts.lock().unwrap()[0].contains("Google, Microsoft"));
    }

    #[test]
    fn pool_set_jsonl() {
        let mut set = PoolSet::default();
        set.insert(arg_pool(&["Syria"]));
        let mut buf = Vec::new();
        set.write_jsonl(&mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains(r#""key":{"kind":"argument","event_type":"Movement:Transport","role":"Origin"}"#));
        assert_eq!(PoolSet::read_jsonl(&buf[..]).unwrap(), set);
    }
}
