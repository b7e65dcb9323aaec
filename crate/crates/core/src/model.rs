//! Shared domain types: triples, data instances, templates and decoding
//! parameters. Everything here is an immutable value with no I/O.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder standing for a triple's subject inside a template pattern.
pub const SUBJECT_PLACEHOLDER: &str = "<subject>";
/// Placeholder standing for a triple's object inside a template pattern.
pub const OBJECT_PLACEHOLDER: &str = "<object>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("ill-formed field {raw:?}: empty after normalization")]
    EmptyField { raw: String },
    #[error("triple {role} {value:?} contains a newline")]
    Newline { role: &'static str, value: String },
    #[error("triple {role} {value:?} contains a template placeholder literal")]
    PlaceholderLiteral { role: &'static str, value: String },
    #[error("instance {id:?} has no triples")]
    NoTriples { id: String },
    #[error("instance {id:?} has an empty reference at position {index}")]
    EmptyReference { id: String, index: usize },
    #[error("instance id must not be empty")]
    EmptyId,
    #[error("template pattern {pattern:?} must contain exactly one <subject> and one <object> (found {subjects} and {objects})")]
    PlaceholderCount {
        pattern: String,
        subjects: usize,
        objects: usize,
    },
    #[error("invalid decode config: {0}")]
    Decode(String),
}

/// Cleans a raw corpus field: underscores become spaces, whitespace runs
/// collapse, and a pair of straight double quotes enclosing the whole value
/// is removed.
pub fn normalize_field(raw: &str) -> Result<String, ModelError> {
    let collapsed = collapse_whitespace(&raw.replace('_', " "));
    let unquoted = match collapsed
        .strip_prefix('"')
        .and_then(|rest| rest.strip_suffix('"'))
    {
        Some(inner) if !inner.contains('"') => collapse_whitespace(inner),
        _ => collapsed,
    };
    if unquoted.is_empty() {
        return Err(ModelError::EmptyField {
            raw: raw.to_string(),
        });
    }
    Ok(unquoted)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Turns a predicate identifier into plain words: camelCase humps and
/// underscores become spaces, words are lowercased, and all-caps acronyms
/// (two or more capitals) are kept as written.
///
/// `"birthPlace"` becomes `"birth place"`, `"ISBN_number"` becomes
/// `"ISBN number"`.
pub fn predicate_words(predicate: &str) -> String {
    let mut words: Vec<String> = Vec::new();
    for chunk in predicate.split(|c: char| c == '_' || c.is_whitespace()) {
        split_camel(chunk, &mut words);
    }
    let rendered = words
        .into_iter()
        .map(|w| {
            let letters = w.chars().filter(|c| c.is_alphabetic()).count();
            if letters >= 2 && w.chars().all(|c| !c.is_lowercase()) {
                w
            } else {
                w.to_lowercase()
            }
        })
        .collect::<Vec<_>>()
        .join(" ");
    if rendered.is_empty() {
        predicate.trim().to_string()
    } else {
        rendered
    }
}

fn split_camel(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_uppercase() && !current.is_empty() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            // "birthPlace" splits before P; "PDFFile" splits before the F of "File".
            if !prev.is_uppercase() || next_lower {
                out.push(std::mem::take(&mut current));
            }
        }
        current.push(c);
    }
    if !current.is_empty() {
        out.push(current);
    }
}

/// One subject/predicate/object fact.
///
/// Serializes as a three-element JSON array `[subject, predicate, object]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[String; 3]", into = "[String; 3]")]
pub struct Triple {
    subject: String,
    predicate: String,
    object: String,
}

impl Triple {
    /// Builds a triple from already-clean fields, checking the invariants.
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let triple = Triple {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        };
        for (role, value) in [
            ("subject", &triple.subject),
            ("predicate", &triple.predicate),
            ("object", &triple.object),
        ] {
            if value.trim().is_empty() {
                return Err(ModelError::EmptyField { raw: value.clone() });
            }
            if value.contains(['\n', '\r']) {
                return Err(ModelError::Newline {
                    role,
                    value: value.clone(),
                });
            }
            if value.contains(SUBJECT_PLACEHOLDER) || value.contains(OBJECT_PLACEHOLDER) {
                return Err(ModelError::PlaceholderLiteral {
                    role,
                    value: value.clone(),
                });
            }
        }
        Ok(triple)
    }

    /// Runs [`normalize_field`] over each raw field, then validates.
    pub fn from_raw(subject: &str, predicate: &str, object: &str) -> Result<Self, ModelError> {
        Triple::new(
            normalize_field(subject)?,
            normalize_field(predicate)?,
            normalize_field(object)?,
        )
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn predicate(&self) -> &str {
        &self.predicate
    }

    pub fn object(&self) -> &str {
        &self.object
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.subject, self.predicate, self.object)
    }
}

impl TryFrom<[String; 3]> for Triple {
    type Error = ModelError;

    fn try_from([s, p, o]: [String; 3]) -> Result<Self, Self::Error> {
        Triple::new(s, p, o)
    }
}

impl From<Triple> for [String; 3] {
    fn from(t: Triple) -> Self {
        [t.subject, t.predicate, t.object]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "dev" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "test_seen" => Ok(Split::TestSeen),
            "test_unseen" => Ok(Split::TestUnseen),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A triple set with its reference texts: one generation task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct DataInstance {
    id: String,
    triples: Vec<Triple>,
    references: Vec<String>,
    category: Option<String>,
    split: Split,
}

#[derive(Deserialize)]
struct RawInstance {
    id: String,
    triples: Vec<Triple>,
    references: Vec<String>,
    category: Option<String>,
    split: Split,
}

impl TryFrom<RawInstance> for DataInstance {
    type Error = ModelError;

    fn try_from(raw: RawInstance) -> Result<Self, Self::Error> {
        DataInstance::new(raw.id, raw.triples, raw.references, raw.category, raw.split)
    }
}

impl DataInstance {
    pub fn new(
        id: impl Into<String>,
        triples: Vec<Triple>,
        references: Vec<String>,
        category: Option<String>,
        split: Split,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ModelError::EmptyId);
        }
        if triples.is_empty() {
            return Err(ModelError::NoTriples { id });
        }
        if let Some(index) = references.iter().position(|r| r.trim().is_empty()) {
            return Err(ModelError::EmptyReference { id, index });
        }
        Ok(DataInstance {
            id,
            triples,
            references,
            category,
            split,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn references(&self) -> &[String] {
        &self.references
    }

    pub fn category(&self) -> Option<&str> {
        self.category.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn predicates(&self) -> impl Iterator<Item = &str> {
        self.triples.iter().map(|t| t.predicate())
    }

    pub fn is_labeled(&self) -> bool {
        !self.references.is_empty()
    }

    /// Copy of the instance with its references dropped, for generation stages
    /// that must not see gold text.
    pub fn without_references(&self) -> DataInstance {
        DataInstance {
            references: Vec::new(),
            ..self.clone()
        }
    }

    pub fn with_split(mut self, split: Split) -> DataInstance {
        self.split = split;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Manual,
    Fallback,
}

/// A per-predicate sentence pattern with one `<subject>` and one `<object>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    predicate: String,
    pattern: String,
    source_triple: Option<Triple>,
    provenance: Provenance,
}

impl Template {
    pub fn new(
        predicate: impl Into<String>,
        pattern: impl Into<String>,
        source_triple: Option<Triple>,
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        let pattern = pattern.into();
        let subjects = pattern.matches(SUBJECT_PLACEHOLDER).count();
        let objects = pattern.matches(OBJECT_PLACEHOLDER).count();
        if subjects != 1 || objects != 1 {
            return Err(ModelError::PlaceholderCount {
                pattern,
                subjects,
                objects,
            });
        }
        Ok(Template {
            predicate: predicate.into(),
            pattern,
            source_triple,
            provenance,
        })
    }

    pub fn predicate(&self) -> &str {
        &self.predicate
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// The triple the pattern was mined from; `None` for manual and fallback
    /// templates.
    pub fn source_triple(&self) -> Option<&Triple> {
        self.source_triple.as_ref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// The short sentence produced for one triple of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisambiguatedSentence {
    pub triple_index: usize,
    pub text: String,
    pub template_provenance: Provenance,
}

/// Decoding parameters passed through to a generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: u32,
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequence: Option<String>,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 5,
            max_new_tokens: 256,
            stop_sequence: None,
            temperature: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_width == 0 {
            return Err(ModelError::Decode("beam_width must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(ModelError::Decode("max_new_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Decode(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}
