//! Pluggable judgment components used by the refinement strategies.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::RefineError;
use crate::backend::{BackendConfig, JsonEndpoint};
use crate::pools::normalize_mention;

/// The confirmative phrase every reflection answer is compared against.
pub const CONFIRMATION: &str = "Yes, it is.";

/// Decides whether a free-form answer confirms the question it answers.
pub trait AnswerChecker: Send + Sync {
    fn affirms(&self, answer: &str) -> Result<bool, RefineError>;
}

const AFFIRMATIONS: &[&str] = &[
    "yes",
    "yeah",
    "yep",
    "yup",
    "correct",
    "indeed",
    "absolutely",
    "certainly",
    "definitely",
    "affirmative",
    "true",
    "right",
    "sure",
];

const NEGATIONS: &[&str] = &[
    "no", "not", "never", "neither", "nor", "none", "nothing", "nobody", "cannot", "nowhere",
];

/// Affirmative iff the first sentence opens with an affirmation word and
/// holds no negation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalChecker;

pub fn first_sentence(text: &str) -> &str {
    let text = text.trim_start();
    match text.find(['.', '!', '?', '\n', ';']) {
        Some(i) => &text[..i],
        None => text,
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase().replace('\u{2019}', "'"))
        .collect()
}

impl LexicalChecker {
    pub fn classify(answer: &str) -> bool {
        let words = words(first_sentence(answer));
        let Some(first) = words.first() else {
            return false;
        };
        AFFIRMATIONS.contains(&first.as_str())
            && !words
                .iter()
                .any(|w| NEGATIONS.contains(&w.as_str()) || w.ends_with("n't"))
    }
}

impl AnswerChecker for LexicalChecker {
    fn affirms(&self, answer: &str) -> Result<bool, RefineError> {
        Ok(Self::classify(answer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub entailed: bool,
    pub score: f64,
}

/// Judges whether `premise` entails `hypothesis`.
pub trait EntailmentJudge: Send + Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<Judgment, RefineError>;
}

/// Answer checker asking an entailment judge whether the answer entails
/// the confirmative phrase.
#[derive(Clone)]
pub struct EntailmentAnswerChecker {
    pub judge: Arc<dyn EntailmentJudge>,
}

impl AnswerChecker for EntailmentAnswerChecker {
    fn affirms(&self, answer: &str) -> Result<bool, RefineError> {
        Ok(self.judge.judge(answer, CONFIRMATION)?.entailed)
    }
}

/// Entailment judge behind an HTTP endpoint taking `{premise, hypothesis}`
/// and returning `{entailed, score}`. Honors record/replay like the chat
/// client.
pub struct HttpEntailmentJudge {
    endpoint: JsonEndpoint,
}

impl HttpEntailmentJudge {
    pub fn new(config: &BackendConfig) -> Result<Self, RefineError> {
        Ok(HttpEntailmentJudge {
            endpoint: JsonEndpoint::new(config).map_err(RefineError::Backend)?,
        })
    }

    pub fn network_calls(&self) -> usize {
        self.endpoint.network_calls()
    }
}

impl EntailmentJudge for HttpEntailmentJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<Judgment, RefineError> {
        let body = json!({ "premise": premise, "hypothesis": hypothesis });
        let value = self.endpoint.call(&body).map_err(|e| unavailable("entailment", e))?;
        serde_json::from_value(value).map_err(|e| RefineError::CheckerUnavailable {
            checker: "entailment",
            reason: format!("malformed judgment: {e}"),
        })
    }
}

fn unavailable(checker: &'static str, e: crate::backend::BackendError) -> RefineError {
    match e {
        e @ crate::backend::BackendError::CassetteMiss { .. } => RefineError::Backend(e),
        e => RefineError::CheckerUnavailable {
            checker,
            reason: e.to_string(),
        },
    }
}

/// An entity found in a passage, as character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizedEntity {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

pub trait EntityRecognizer: Send + Sync {
    fn recognize(&self, text: &str) -> Result<Vec<RecognizedEntity>, RefineError>;
}

/// Dictionary recognizer: every occurrence of a known mention is an entity
/// of its recorded type.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: BTreeMap<String, (String, String)>,
}

impl Gazetteer {
    /// Adds `mention` as `entity_type`; the first type recorded wins.
    pub fn insert(&mut self, mention: &str, entity_type: &str) {
        let key = normalize_mention(mention);
        if key.is_empty() {
            return;
        }
        self.entries
            .entry(key)
            .or_insert_with(|| (mention.trim().to_string(), entity_type.to_string()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<S: AsRef<str>, T: AsRef<str>> FromIterator<(S, T)> for Gazetteer {
    fn from_iter<I: IntoIterator<Item = (S, T)>>(iter: I) -> Self {
        let mut g = Gazetteer::default();
        for (m, t) in iter {
            g.insert(m.as_ref(), t.as_ref());
        }
        g
    }
}

impl EntityRecognizer for Gazetteer {
    fn recognize(&self, text: &str) -> Result<Vec<RecognizedEntity>, RefineError> {
        let mut found = Vec::new();
        for (mention, ty) in self.entries.values() {
            let mut from = 0;
            while let Some(i) = text[from..].find(mention.as_str()) {
                let byte = from + i;
                let start = text[..byte].chars().count();
                found.push(RecognizedEntity {
                    start,
                    end: start + mention.chars().count(),
                    entity_type: ty.clone(),
                });
                from = byte + mention.len();
            }
        }
        found.sort_by_key(|e| (e.start, e.end));
        Ok(found)
    }
}

/// Part-of-speech tagger returning parallel token and tag lists.
pub trait PosTagger: Send + Sync {
    fn tag(&self, text: &str) -> Result<(Vec<String>, Vec<String>), RefineError>;
}

/// Tagger behind an HTTP endpoint taking `{text}` and returning
/// `{tokens, pos_tags}`.
pub struct HttpPosTagger {
    endpoint: JsonEndpoint,
}

impl HttpPosTagger {
    pub fn new(config: &BackendConfig) -> Result<Self, RefineError> {
        Ok(HttpPosTagger {
            endpoint: JsonEndpoint::new(config).map_err(RefineError::Backend)?,
        })
    }
}

#[derive(Deserialize)]
struct Tagged {
    tokens: Vec<String>,
    pos_tags: Vec<String>,
}

impl PosTagger for HttpPosTagger {
    fn tag(&self, text: &str) -> Result<(Vec<String>, Vec<String>), RefineError> {
        let value: Value = self.endpoint.call(&json!({ "text": text })).map_err(|e| unavailable("pos", e))?;
        let t: Tagged = serde_json::from_value(value).map_err(|e| RefineError::CheckerUnavailable {
            checker: "pos",
            reason: format!("malformed tagging: {e}"),
        })?;
        if t.tokens.len() != t.pos_tags.len() {
            return Err(RefineError::CheckerUnavailable {
                checker: "pos",
                reason: "tokens and pos_tags differ in length".into(),
            });
        }
        Ok((t.tokens, t.pos_tags))
    }
}

/// POS agreement check: an argument mention passes if one of its tokens
/// carries a tag starting with one of `expected_prefixes`.
#[derive(Clone)]
pub struct PosCheck {
    pub tagger: Arc<dyn PosTagger>,
    pub expected_prefixes: Vec<String>,
}

impl PosCheck {
    pub fn nominal(tagger: Arc<dyn PosTagger>) -> Self {
        PosCheck {
            tagger,
            expected_prefixes: vec!["NN".into(), "PRP".into(), "CD".into()],
        }
    }

    /// Tags of the tokens overlapping `[start, end)`; `None` if the tokens
    /// cannot be aligned with `text`.
    pub fn tags_for(tokens: &[String], tags: &[String], text: &str, start: usize, end: usize) -> Option<Vec<String>> {
        let chars: Vec<char> = text.chars().collect();
        let mut pos = 0;
        let mut out = Vec::new();
        for (tok, tag) in tokens.iter().zip(tags) {
            let tok_chars: Vec<char> = tok.chars().collect();
            if tok_chars.is_empty() {
                continue;
            }
            let offset = (pos..=chars.len().checked_sub(tok_chars.len())?).find(|&i| chars[i..i + tok_chars.len()] == tok_chars[..])?;
            let tok_end = offset + tok_chars.len();
            if offset < end && start < tok_end {
                out.push(tag.clone());
            }
            pos = tok_end;
        }
        Some(out)
    }

    pub fn matches(&self, tags: &[String]) -> bool {
        tags.iter()
            .any(|t| self.expected_prefixes.iter().any(|p| t.starts_with(p.as_str())))
    }
}

/// The checkers available to a refinement run. Only the answer checker is
/// mandatory; missing optional checkers skip their dimensions.
#[derive(Clone)]
pub struct Checkers {
    pub answer: Arc<dyn AnswerChecker>,
    pub entailment: Option<Arc<dyn EntailmentJudge>>,
    pub recognizer: Option<Arc<dyn EntityRecognizer>>,
    pub pos: Option<PosCheck>,
}

impl Default for Checkers {
    fn default() -> Self {
        Checkers {
            answer: Arc::new(LexicalChecker),
            entailment: None,
            recognizer: None,
            pos: None,
        }
    }
}

impl std::fmt::Debug for Checkers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkers")
            .field("entailment", &self.entailment.is_some())
            .field("recognizer", &self.recognizer.is_some())
            .field("pos", &self.pos.is_some())
            .finish()
    }
}
