//! Event / relation ontology: the label space that target structures are
//! sampled from and that decoded passages are checked against.
//!
//! An ontology is one self-describing JSON document:
//!
//! ```json
//! {
//!   "entity_types": ["PER", "GPE"],
//!   "event_types": [
//!     {"name": "Justice:Sue", "definition": "...",
//!      "roles": [{"role": "Plaintiff", "definition": "...", "allowed_entity_types": ["PER"]}]}
//!   ],
//!   "relation_types": [{"name": "org:founded_by", "definition": "..."}]
//! }
//! ```
//!
//! Role order inside an event type is the document order and is kept as-is:
//! prompts render roles in that order and samplers iterate it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tag name reserved for triggers in tagged passages.
pub const TRIGGER_TAG: &str = "Trigger";
/// Tag names used for relation subject / object spans.
pub const SUBJECT_TAG: &str = "Subject";
pub const OBJECT_TAG: &str = "Object";

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("failed to parse ontology document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid ontology at {path}: {message}")]
    Validation { path: String, message: String },
    #[error("unknown event type `{0}`")]
    UnknownEventType(String),
    #[error("unknown relation type `{0}`")]
    UnknownRelationType(String),
    #[error("event type `{event_type}` has no role `{role}`")]
    UnknownRole { event_type: String, role: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentRoleSpec {
    pub role: String,
    pub definition: String,
    pub allowed_entity_types: Vec<String>,
}

impl ArgumentRoleSpec {
    /// Tag name used when this role wraps a span: the role name with
    /// whitespace removed.
    pub fn tag(&self) -> String {
        role_tag(&self.role)
    }
}

/// Role name with all whitespace removed.
pub fn role_tag(role: &str) -> String {
    role.chars().filter(|c| !c.is_whitespace()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTypeSpec {
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub roles: Vec<ArgumentRoleSpec>,
}

impl EventTypeSpec {
    pub fn role(&self, name: &str) -> Option<&ArgumentRoleSpec> {
        self.roles.iter().find(|r| r.role == name)
    }

    /// Looks a role up by its tag name.
    pub fn role_by_tag(&self, tag: &str) -> Option<&ArgumentRoleSpec> {
        self.roles.iter().find(|r| r.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTypeSpec {
    pub name: String,
    pub definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_types: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_types: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ontology {
    #[serde(default)]
    pub entity_types: Vec<String>,
    #[serde(default)]
    pub event_types: Vec<EventTypeSpec>,
    #[serde(default)]
    pub relation_types: Vec<RelationTypeSpec>,
}

/// Parses and validates an ontology document.
pub fn load_ontology(document: &[u8]) -> Result<Ontology, OntologyError> {
    let ontology: Ontology = serde_json::from_slice(document)?;
    ontology.validate()?;
    Ok(ontology)
}

pub fn load_ontology_file(path: &std::path::Path) -> Result<Ontology, crate::Error> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(load_ontology(&bytes)?)
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> OntologyError {
    OntologyError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

/// A tag name must survive the codec grammar: ASCII letter first, then
/// letters, digits, `_` or `-`, and no trailing digit (digits are the
/// event-index suffix).
fn is_valid_tag(tag: &str) -> bool {
    let mut chars = tag.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    if !tag
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return false;
    }
    !tag.ends_with(|c: char| c.is_ascii_digit())
}

impl Ontology {
    pub fn validate(&self) -> Result<(), OntologyError> {
        let mut entity_names = HashSet::new();
        for (i, name) in self.entity_types.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(invalid(format!("entity_types[{i}]"), "empty entity type name"));
            }
            if !entity_names.insert(name.as_str()) {
                return Err(invalid(
                    format!("entity_types[{i}]"),
                    format!("duplicate entity type `{name}`"),
                ));
            }
        }

        let mut event_names = HashSet::new();
        for (i, et) in self.event_types.iter().enumerate() {
            let at = format!("event_types[{i}]");
            if et.name.trim().is_empty() {
                return Err(invalid(format!("{at}.name"), "empty event type name"));
            }
            if !event_names.insert(et.name.as_str()) {
                return Err(invalid(
                    format!("{at}.name"),
                    format!("duplicate event type `{}`", et.name),
                ));
            }
            if et.definition.trim().is_empty() {
                return Err(invalid(format!("{at}.definition"), "empty definition"));
            }
            let mut tags = HashSet::new();
            for (j, role) in et.roles.iter().enumerate() {
                let rat = format!("{at}.roles[{j}]");
                let tag = role.tag();
                if !is_valid_tag(&tag) || tag == TRIGGER_TAG {
                    return Err(invalid(
                        format!("{rat}.role"),
                        format!("role name `{}` cannot be used as a tag", role.role),
                    ));
                }
                if !tags.insert(tag) {
                    return Err(invalid(
                        format!("{rat}.role"),
                        format!("duplicate role `{}` in `{}`", role.role, et.name),
                    ));
                }
                if role.definition.trim().is_empty() {
                    return Err(invalid(format!("{rat}.definition"), "empty definition"));
                }
                if role.allowed_entity_types.is_empty() {
                    return Err(invalid(
                        format!("{rat}.allowed_entity_types"),
                        "at least one allowed entity type is required",
                    ));
                }
                for (k, ty) in role.allowed_entity_types.iter().enumerate() {
                    if !entity_names.contains(ty.as_str()) {
                        return Err(invalid(
                            format!("{rat}.allowed_entity_types[{k}]"),
                            format!("unknown entity type `{ty}`"),
                        ));
                    }
                }
            }
        }

        let mut relation_names = HashSet::new();
        for (i, rt) in self.relation_types.iter().enumerate() {
            let at = format!("relation_types[{i}]");
            if rt.name.trim().is_empty() {
                return Err(invalid(format!("{at}.name"), "empty relation type name"));
            }
            if !relation_names.insert(rt.name.as_str()) {
                return Err(invalid(
                    format!("{at}.name"),
                    format!("duplicate relation type `{}`", rt.name),
                ));
            }
            if rt.definition.trim().is_empty() {
                return Err(invalid(format!("{at}.definition"), "empty definition"));
            }
            let constraints = [("subject_types", &rt.subject_types), ("object_types", &rt.object_types)];
            for (field, types) in constraints {
                for (k, ty) in types.iter().flatten().enumerate() {
                    if !entity_names.contains(ty.as_str()) {
                        return Err(invalid(
                            format!("{at}.{field}[{k}]"),
                            format!("unknown entity type `{ty}`"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn event_type(&self, name: &str) -> Result<&EventTypeSpec, OntologyError> {
        self.event_types
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| OntologyError::UnknownEventType(name.to_string()))
    }

    pub fn relation_type(&self, name: &str) -> Result<&RelationTypeSpec, OntologyError> {
        self.relation_types
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| OntologyError::UnknownRelationType(name.to_string()))
    }

    /// Every role of an event type, in document order.
    pub fn roles_of(&self, event_type: &str) -> Result<&[ArgumentRoleSpec], OntologyError> {
        Ok(&self.event_type(event_type)?.roles)
    }

    pub fn has_entity_type(&self, name: &str) -> bool {
        self.entity_types.iter().any(|e| e == name)
    }
}
