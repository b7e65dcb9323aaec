//! Triple disambiguation: turns each triple into a short sentence using one
//! template per predicate. Templates are mined from a single LLM completion
//! per predicate and cached in a [`TemplateStore`].

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::backend::{map_bounded, BackendError, CompletionBackend};
use crate::model::{
    predicate_words, DataInstance, DisambiguatedSentence, ModelError, Provenance, Template, Triple,
    OBJECT_PLACEHOLDER, SUBJECT_PLACEHOLDER,
};

/// The four demonstrations placed before every query.
pub const DEFAULT_PROMPT_PREFIX: &str = "\
Table: Michael | birth Place | USA
Text: Michael was born in the USA.

Table: First Clearing | location | On NYS 52 1 Mi. Youngsville
Text: First Clearing is located at On NYS 52 1 Mi. Youngsville.

Table: Abilene Regional Airport | city Served | Abilene Texas
Text: Abilene Regional Airport serves Abilene Texas.

Table: Alfred Moore Scales | active Years Start Date | 1875-03-04
Text: Alfred Moore Scales started to be active on 1875-03-04.";

const DEMONSTRATION_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum DisambiguationError {
    #[error("triple field {0:?} contains '|' and cannot be written as a table row")]
    PipeInField(String),
    #[error("template for {template:?} applied to a triple with predicate {triple:?}")]
    PredicateMismatch { template: String, triple: String },
    #[error("no template for predicate {0:?}")]
    MissingTemplate(String),
    #[error(transparent)]
    Extraction(#[from] TemplateExtractionFailure),
    #[error("template store {path}: {message}")]
    Store { path: String, message: String },
    #[error("manual templates: {}", .0.iter().map(|(p, m)| format!("{p}: {m}")).collect::<Vec<_>>().join("; "))]
    ManualTemplates(Vec<(String, String)>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The LLM sentence could not be turned into a template.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot mine a template from {sentence:?}: {reason}")]
pub struct TemplateExtractionFailure {
    pub sentence: String,
    pub reason: String,
}

/// Prompt text and completion settings for the disambiguation LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prefix: String,
    pub stop_sequence: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            prefix: DEFAULT_PROMPT_PREFIX.to_string(),
            stop_sequence: "\n".to_string(),
            max_new_tokens: 256,
            temperature: 0.0,
        }
    }
}

impl PromptSpec {
    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix = prefix.into();
        self
    }
}

/// Formats a triple as the `Table: s | p | o\nText:` query line.
pub fn format_query(triple: &Triple) -> Result<String, DisambiguationError> {
    for field in [triple.subject(), triple.predicate(), triple.object()] {
        if field.contains('|') {
            return Err(DisambiguationError::PipeInField(field.to_string()));
        }
    }
    Ok(format!(
        "Table: {} | {} | {}\nText:",
        triple.subject(),
        triple.predicate(),
        triple.object()
    ))
}

/// Demonstrations, one blank line, then the query for `triple`.
pub fn build_prompt(triple: &Triple, spec: &PromptSpec) -> Result<String, DisambiguationError> {
    let query = format_query(triple)?;
    if spec.prefix.is_empty() {
        return Ok(query);
    }
    Ok(format!("{}{DEMONSTRATION_SEPARATOR}{query}", spec.prefix))
}

fn chars_equal_ignore_case(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

/// Byte length of the case-insensitive match of `needle` at the start of
/// `hay`, if any.
fn match_prefix_ci(hay: &str, needle: &str) -> Option<usize> {
    let mut hay_chars = hay.char_indices();
    for n in needle.chars() {
        let (_, h) = hay_chars.next()?;
        if !chars_equal_ignore_case(h, n) {
            return None;
        }
    }
    Some(hay_chars.next().map_or(hay.len(), |(i, _)| i))
}

fn find_field(sentence: &str, field: &str, taken: Option<&Range<usize>>) -> Option<Range<usize>> {
    let first_alnum = field.chars().next().is_some_and(char::is_alphanumeric);
    let last_alnum = field.chars().next_back().is_some_and(char::is_alphanumeric);
    for (start, _) in sentence.char_indices() {
        let Some(len) = match_prefix_ci(&sentence[start..], field) else {
            continue;
        };
        let end = start + len;
        if first_alnum && sentence[..start].chars().next_back().is_some_and(char::is_alphanumeric) {
            continue;
        }
        if last_alnum && sentence[end..].chars().next().is_some_and(char::is_alphanumeric) {
            continue;
        }
        if taken.is_some_and(|t| start < t.end && t.start < end) {
            continue;
        }
        return Some(start..end);
    }
    None
}

/// Replaces the subject and object of `triple` inside `llm_sentence` with
/// placeholders.
///
/// The longer field is located first (the subject on ties) so a short object
/// that also occurs inside the subject binds to its own mention. Matching is
/// case-insensitive and respects word boundaries.
pub fn mine_template(
    triple: &Triple,
    llm_sentence: &str,
) -> Result<Template, TemplateExtractionFailure> {
    let sentence = llm_sentence.trim();
    let fail = |reason: &str| TemplateExtractionFailure {
        sentence: llm_sentence.to_string(),
        reason: reason.to_string(),
    };
    if sentence.is_empty() {
        return Err(fail("empty sentence"));
    }
    let subject_first = triple.subject().chars().count() >= triple.object().chars().count();
    let (first, second) = if subject_first {
        (triple.subject(), triple.object())
    } else {
        (triple.object(), triple.subject())
    };
    let first_span =
        find_field(sentence, first, None).ok_or_else(|| fail(&format!("{first:?} not found")))?;
    let second_span = find_field(sentence, second, Some(&first_span))
        .ok_or_else(|| fail(&format!("{second:?} not found outside {first:?}")))?;
    let (subject_span, object_span) = if subject_first {
        (first_span, second_span)
    } else {
        (second_span, first_span)
    };

    let mut spans = [
        (subject_span, SUBJECT_PLACEHOLDER),
        (object_span, OBJECT_PLACEHOLDER),
    ];
    spans.sort_by_key(|(r, _)| r.start);
    let mut pattern = String::with_capacity(sentence.len());
    let mut cursor = 0;
    for (range, placeholder) in &spans {
        pattern.push_str(&sentence[cursor..range.start]);
        pattern.push_str(placeholder);
        cursor = range.end;
    }
    pattern.push_str(&sentence[cursor..]);

    Template::new(triple.predicate(), pattern, Some(triple.clone()), Provenance::Llm)
        .map_err(|e| fail(&e.to_string()))
}

fn has_terminal_punctuation(s: &str) -> bool {
    s.ends_with(['.', '!', '?'])
}

/// Fills a template with a triple's subject and object and makes sure the
/// sentence ends with terminal punctuation.
pub fn apply_template(template: &Template, triple: &Triple) -> Result<String, DisambiguationError> {
    if template.predicate() != triple.predicate() {
        return Err(DisambiguationError::PredicateMismatch {
            template: template.predicate().to_string(),
            triple: triple.predicate().to_string(),
        });
    }
    let pattern = template.pattern();
    let s = pattern.find(SUBJECT_PLACEHOLDER).expect("validated template");
    let o = pattern.find(OBJECT_PLACEHOLDER).expect("validated template");
    let mut slots = [
        (s, SUBJECT_PLACEHOLDER.len(), triple.subject()),
        (o, OBJECT_PLACEHOLDER.len(), triple.object()),
    ];
    slots.sort_by_key(|slot| slot.0);

    let mut out = String::with_capacity(pattern.len() + triple.subject().len() + triple.object().len());
    let mut cursor = 0;
    for (at, len, value) in slots {
        out.push_str(&pattern[cursor..at]);
        out.push_str(value);
        cursor = at + len;
    }
    out.push_str(&pattern[cursor..]);
    let trimmed_len = out.trim_end().len();
    out.truncate(trimmed_len);
    if !has_terminal_punctuation(&out) {
        out.push('.');
    }
    Ok(out)
}

pub fn fallback_template(predicate: &str) -> Template {
    Template::new(
        predicate,
        format!("{SUBJECT_PLACEHOLDER} {} {OBJECT_PLACEHOLDER}", predicate_words(predicate)),
        None,
        Provenance::Fallback,
    )
    .expect("fallback pattern has both placeholders")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredTemplate {
    pub template: Template,
    pub created_at: String,
}

#[derive(Serialize, Deserialize)]
struct StoredTemplateRecord {
    pattern: String,
    source_triple: Option<Triple>,
    provenance: Provenance,
    created_at: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProvenanceCounts {
    pub llm: usize,
    pub manual: usize,
    pub fallback: usize,
}

/// Predicate → template cache. Persists as a JSON object with sorted keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateStore {
    entries: BTreeMap<String, StoredTemplate>,
}

impl TemplateStore {
    pub fn new() -> Self {
        TemplateStore::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, predicate: &str) -> bool {
        self.entries.contains_key(predicate)
    }

    pub fn get(&self, predicate: &str) -> Option<&Template> {
        self.entries.get(predicate).map(|e| &e.template)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &StoredTemplate)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Inserts or replaces the template for its predicate.
    pub fn insert(&mut self, template: Template) {
        let created_at = Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true);
        self.insert_with_timestamp(template, created_at);
    }

    pub fn insert_with_timestamp(&mut self, template: Template, created_at: String) {
        self.entries.insert(
            template.predicate().to_string(),
            StoredTemplate {
                template,
                created_at,
            },
        );
    }

    /// Adds every entry of `other` whose predicate is not already present.
    pub fn merge_missing(&mut self, other: TemplateStore) {
        for (k, v) in other.entries {
            self.entries.entry(k).or_insert(v);
        }
    }

    pub fn provenance_counts(&self) -> ProvenanceCounts {
        let mut counts = ProvenanceCounts::default();
        for entry in self.entries.values() {
            match entry.template.provenance() {
                Provenance::Llm => counts.llm += 1,
                Provenance::Manual => counts.manual += 1,
                Provenance::Fallback => counts.fallback += 1,
            }
        }
        counts
    }

    pub fn to_json(&self) -> String {
        let records: BTreeMap<&str, StoredTemplateRecord> = self
            .entries
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str(),
                    StoredTemplateRecord {
                        pattern: v.template.pattern().to_string(),
                        source_triple: v.template.source_triple().cloned(),
                        provenance: v.template.provenance(),
                        created_at: v.created_at.clone(),
                    },
                )
            })
            .collect();
        let mut json = serde_json::to_string_pretty(&records).expect("store serializes");
        json.push('\n');
        json
    }

    pub fn from_json(json: &str) -> Result<Self, DisambiguationError> {
        let store_err = |message: String| DisambiguationError::Store {
            path: "<memory>".into(),
            message,
        };
        let records: BTreeMap<String, StoredTemplateRecord> =
            serde_json::from_str(json).map_err(|e| store_err(e.to_string()))?;
        let mut store = TemplateStore::new();
        for (predicate, rec) in records {
            let template = Template::new(predicate, rec.pattern, rec.source_triple, rec.provenance)?;
            store.insert_with_timestamp(template, rec.created_at);
        }
        Ok(store)
    }

    /// Loads a store; a missing file yields an empty store.
    pub fn load(path: &Path) -> Result<Self, DisambiguationError> {
        match std::fs::read_to_string(path) {
            Ok(json) => TemplateStore::from_json(&json).map_err(|e| match e {
                DisambiguationError::Store { message, .. } => DisambiguationError::Store {
                    path: path.display().to_string(),
                    message,
                },
                other => other,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(TemplateStore::new()),
            Err(e) => Err(DisambiguationError::Store {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }

    /// Writes the store through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), DisambiguationError> {
        let store_err = |e: std::io::Error| DisambiguationError::Store {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(store_err)?;
        std::fs::rename(&tmp, path).map_err(store_err)
    }
}

struct UniqueMap(Vec<(String, String)>, Vec<String>);

impl<'de> Deserialize<'de> for UniqueMap {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MapVisitor;
        impl<'de> Visitor<'de> for MapVisitor {
            type Value = UniqueMap;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON object mapping predicates to patterns")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<UniqueMap, A::Error> {
                let mut seen = HashSet::new();
                let mut entries = Vec::new();
                let mut duplicates = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, String>()? {
                    if !seen.insert(k.clone()) {
                        duplicates.push(k.clone());
                    }
                    entries.push((k, v));
                }
                Ok(UniqueMap(entries, duplicates))
            }
        }
        deserializer.deserialize_map(MapVisitor)
    }
}

/// Parses a flat `{predicate: pattern}` JSON map of hand-written templates.
/// An empty (or whitespace-only) document is an empty store.
pub fn parse_manual_templates(json: &str) -> Result<TemplateStore, DisambiguationError> {
    if json.trim().is_empty() {
        return Ok(TemplateStore::new());
    }
    let UniqueMap(entries, duplicates) = serde_json::from_str(json).map_err(|e| {
        DisambiguationError::ManualTemplates(vec![("<file>".into(), e.to_string())])
    })?;
    let mut problems: Vec<(String, String)> = duplicates
        .into_iter()
        .map(|p| (p, "duplicate predicate key".to_string()))
        .collect();
    let mut store = TemplateStore::new();
    for (predicate, pattern) in entries {
        match Template::new(predicate.clone(), pattern, None, Provenance::Manual) {
            Ok(t) => store.insert(t),
            Err(e) => problems.push((predicate, e.to_string())),
        }
    }
    if problems.is_empty() {
        Ok(store)
    } else {
        Err(DisambiguationError::ManualTemplates(problems))
    }
}

pub fn load_manual_templates(path: &Path) -> Result<TemplateStore, DisambiguationError> {
    let json = std::fs::read_to_string(path).map_err(|e| DisambiguationError::Store {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_manual_templates(&json)
}

/// What happened while filling the store.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EnsureReport {
    /// Predicates that had no template before the call, in corpus order.
    pub missing: Vec<String>,
    pub backend_calls: usize,
    pub mined: usize,
    pub extraction_failures: Vec<(String, String)>,
    pub backend_failures: Vec<(String, String)>,
    /// Predicates whose every triple contains '|', so no prompt could be built.
    pub unpromptable: Vec<String>,
    pub offline_fallbacks: usize,
}

impl EnsureReport {
    pub fn fallbacks(&self) -> usize {
        self.extraction_failures.len()
            + self.backend_failures.len()
            + self.unpromptable.len()
            + self.offline_fallbacks
    }
}

/// Makes sure every predicate in `instances` has a template, querying the
/// backend once per missing predicate. The queried triple is the first one
/// in corpus order whose fields can be written as a table row.
///
/// Without a backend, missing predicates get fallback templates.
pub fn ensure_templates(
    instances: &[DataInstance],
    store: &mut TemplateStore,
    backend: Option<&dyn CompletionBackend>,
    spec: &PromptSpec,
    parallelism: usize,
) -> EnsureReport {
    let mut report = EnsureReport::default();
    let mut first_triple: BTreeMap<&str, Option<(&Triple, String)>> = BTreeMap::new();
    for triple in instances.iter().flat_map(|i| i.triples()) {
        let predicate = triple.predicate();
        if store.contains(predicate) {
            continue;
        }
        let slot = first_triple.entry(predicate).or_insert_with(|| {
            report.missing.push(predicate.to_string());
            None
        });
        if slot.is_none() {
            if let Ok(prompt) = build_prompt(triple, spec) {
                *slot = Some((triple, prompt));
            }
        }
    }

    let Some(backend) = backend else {
        for predicate in &report.missing {
            store.insert(fallback_template(predicate));
        }
        report.offline_fallbacks = report.missing.len();
        return report;
    };

    let mut jobs: Vec<(&str, &Triple, String)> = Vec::new();
    for predicate in &report.missing {
        match first_triple.get(predicate.as_str()).cloned().flatten() {
            Some((triple, prompt)) => jobs.push((triple.predicate(), triple, prompt)),
            None => report.unpromptable.push(predicate.clone()),
        }
    }
    for predicate in &report.unpromptable {
        log::warn!("predicate {predicate:?}: every triple contains '|', using fallback template");
        store.insert(fallback_template(predicate));
    }

    let answers: Vec<Result<String, BackendError>> =
        map_bounded(&jobs, parallelism, |(_, _, prompt)| backend.complete(prompt, spec));
    report.backend_calls = jobs.len();

    for ((predicate, triple, _), answer) in jobs.into_iter().zip(answers) {
        match answer {
            Ok(sentence) => match mine_template(triple, &sentence) {
                Ok(t) => {
                    report.mined += 1;
                    store.insert(t);
                }
                Err(e) => {
                    log::warn!("predicate {predicate:?}: {e}; using fallback template");
                    report.extraction_failures.push((predicate.to_string(), sentence));
                    store.insert(fallback_template(predicate));
                }
            },
            Err(e) => {
                log::warn!("predicate {predicate:?}: backend failed ({e}); using fallback template");
                report.backend_failures.push((predicate.to_string(), e.to_string()));
                store.insert(fallback_template(predicate));
            }
        }
    }
    report
}

/// One sentence per triple, in triple order.
pub fn disambiguate(
    instance: &DataInstance,
    store: &TemplateStore,
) -> Result<Vec<DisambiguatedSentence>, DisambiguationError> {
    instance
        .triples()
        .iter()
        .enumerate()
        .map(|(triple_index, triple)| {
            let template = store
                .get(triple.predicate())
                .ok_or_else(|| DisambiguationError::MissingTemplate(triple.predicate().to_string()))?;
            Ok(DisambiguatedSentence {
                triple_index,
                text: apply_template(template, triple)?,
                template_provenance: template.provenance(),
            })
        })
        .collect()
}
