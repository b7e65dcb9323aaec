//! Corpus ingestion: WebNLG XML, DART JSON and E2E CSV parsers, the canonical
//! JSONL interchange format, and derived splits.
//!
//! Parsers fail individual records rather than whole files. A file is only
//! rejected when the share of bad records goes over
//! [`ParseOptions::error_budget`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataInstance, ModelError, Split, Triple};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed XML at line {line}: {message}")]
    Xml { line: u32, message: String },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("CSV is missing the {0:?} column")]
    MissingColumn(&'static str),
    #[error("{bad} of {total} records failed (budget {budget:.2}%); first: {first}")]
    ErrorBudgetExceeded {
        bad: usize,
        total: usize,
        budget: f64,
        first: RecordError,
    },
    #[error("canonical line {line}: {source}")]
    CanonicalLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("duplicate instance ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("cannot sample {k} instances from a pool of {available}")]
    SampleTooLarge { k: usize, available: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// A record that could not be turned into an instance.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record {record}: {message}")]
pub struct RecordError {
    pub record: String,
    pub message: String,
}

impl RecordError {
    fn new(record: impl Into<String>, message: impl ToString) -> Self {
        RecordError {
            record: record.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    WebnlgXml,
    DartJson,
    E2eCsv,
    CanonicalJsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub format: CorpusFormat,
    pub splits: BTreeMap<String, PathBuf>,
}

impl CorpusManifest {
    /// Loads one split, resolving relative paths against `base_dir`.
    pub fn load_split(
        &self,
        split_name: &str,
        base_dir: &Path,
        options: &ParseOptions,
    ) -> Result<(PathBuf, ParseOutcome), CorpusError> {
        let rel = self.splits.get(split_name).ok_or_else(|| CorpusError::Io {
            path: PathBuf::from(split_name),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("corpus {:?} has no split {split_name:?}", self.name),
            ),
        })?;
        let path = if rel.is_absolute() {
            rel.clone()
        } else {
            base_dir.join(rel)
        };
        let bytes = read_file(&path)?;
        let outcome = parse_format(self.format, &bytes, options)?;
        Ok((path, outcome))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// Split tag stamped onto every parsed instance.
    pub split: Split,
    /// Largest tolerated share of failed records, as a fraction (0.01 = 1%).
    pub error_budget: f64,
}

impl ParseOptions {
    pub fn new(split: Split) -> Self {
        ParseOptions {
            split,
            error_budget: 0.01,
        }
    }

    pub fn with_error_budget(mut self, budget: f64) -> Self {
        self.error_budget = budget;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub instances: Vec<DataInstance>,
    /// Records dropped on purpose (e.g. an empty DART tripleset).
    pub skipped: usize,
    pub warnings: Vec<String>,
    /// Records that failed but stayed within the error budget.
    pub errors: Vec<RecordError>,
    pub source_records: usize,
}

impl ParseOutcome {
    fn finish(mut self, options: &ParseOptions) -> Result<Self, CorpusError> {
        let bad = self.errors.len();
        if bad > 0 && bad as f64 > options.error_budget * self.source_records as f64 {
            return Err(CorpusError::ErrorBudgetExceeded {
                bad,
                total: self.source_records,
                budget: options.error_budget * 100.0,
                first: self.errors.swap_remove(0),
            });
        }
        for err in &self.errors {
            log::warn!("{err}");
        }
        Ok(self)
    }
}

pub fn parse_format(
    format: CorpusFormat,
    bytes: &[u8],
    options: &ParseOptions,
) -> Result<ParseOutcome, CorpusError> {
    match format {
        CorpusFormat::WebnlgXml => parse_webnlg(bytes, options),
        CorpusFormat::DartJson => parse_dart(bytes, options),
        CorpusFormat::E2eCsv => parse_e2e(bytes, options),
        CorpusFormat::CanonicalJsonl => {
            let instances = read_canonical(bytes)?;
            Ok(ParseOutcome {
                source_records: instances.len(),
                instances,
                ..ParseOutcome::default()
            })
        }
    }
}

fn element_text(node: roxmltree::Node<'_, '_>) -> String {
    node.descendants()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect::<String>()
}

fn clean_text(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses a WebNLG challenge XML file. Each `entry` becomes one instance built
/// from its `modifiedtripleset`; every `lex` is a reference.
pub fn parse_webnlg(xml: &[u8], options: &ParseOptions) -> Result<ParseOutcome, CorpusError> {
    let text = std::str::from_utf8(xml).map_err(|e| CorpusError::Xml {
        line: 1,
        message: e.to_string(),
    })?;
    let doc = roxmltree::Document::parse(text).map_err(|e| CorpusError::Xml {
        line: e.pos().row,
        message: e.to_string(),
    })?;

    let mut out = ParseOutcome::default();
    for (index, entry) in doc
        .descendants()
        .filter(|n| n.has_tag_name("entry"))
        .enumerate()
    {
        out.source_records += 1;
        let id = entry
            .attribute("eid")
            .map(str::to_string)
            .unwrap_or_else(|| format!("entry-{}", index + 1));
        match webnlg_entry(entry, &id, options.split) {
            Ok(inst) => out.instances.push(inst),
            Err(message) => out.errors.push(RecordError::new(id, message)),
        }
    }
    out.finish(options)
}

fn webnlg_entry(
    entry: roxmltree::Node<'_, '_>,
    id: &str,
    split: Split,
) -> Result<DataInstance, String> {
    let tripleset = entry
        .children()
        .find(|n| n.has_tag_name("modifiedtripleset"))
        .ok_or("no modifiedtripleset element")?;
    let mut triples = Vec::new();
    for mtriple in tripleset.children().filter(|n| n.has_tag_name("mtriple")) {
        let raw = element_text(mtriple);
        let parts: Vec<&str> = raw.split('|').collect();
        if parts.len() != 3 {
            return Err(format!(
                "triple {:?} has {} pipe delimiters, expected 2",
                raw.trim(),
                parts.len() - 1
            ));
        }
        let triple =
            Triple::from_raw(parts[0], parts[1], parts[2]).map_err(|e| e.to_string())?;
        triples.push(triple);
    }
    let references = entry
        .children()
        .filter(|n| n.has_tag_name("lex"))
        .map(|lex| {
            // 2020+ releases nest the sentence in <text>; 2017 puts it directly in <lex>.
            match lex.children().find(|n| n.has_tag_name("text")) {
                Some(t) => clean_text(&element_text(t)),
                None => clean_text(lex.text().unwrap_or_default()),
            }
        })
        .filter(|r| !r.is_empty())
        .collect();
    let category = entry.attribute("category").map(str::to_string);
    DataInstance::new(id, triples, references, category, split).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct DartRecord {
    tripleset: Vec<Vec<String>>,
    #[serde(default)]
    annotations: Vec<DartAnnotation>,
}

#[derive(Deserialize)]
struct DartAnnotation {
    #[serde(default)]
    source: Option<String>,
    text: String,
}

/// Parses a DART release JSON array. The first annotation's `source` (e.g.
/// `webnlg`, `e2e`, `WikiSQL_decl_sents`) is kept as the instance category.
pub fn parse_dart(json: &[u8], options: &ParseOptions) -> Result<ParseOutcome, CorpusError> {
    let records: Vec<serde_json::Value> = serde_json::from_slice(json)?;
    let mut out = ParseOutcome {
        source_records: records.len(),
        ..ParseOutcome::default()
    };
    for (index, value) in records.into_iter().enumerate() {
        let id = format!("dart-{index}");
        let record: DartRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                out.errors.push(RecordError::new(id, e));
                continue;
            }
        };
        if record.tripleset.is_empty() {
            out.skipped += 1;
            out.warnings.push(format!("{id}: empty tripleset skipped"));
            continue;
        }
        match dart_record(record, &id, options.split) {
            Ok(inst) => out.instances.push(inst),
            Err(message) => out.errors.push(RecordError::new(id, message)),
        }
    }
    out.finish(options)
}

fn dart_record(record: DartRecord, id: &str, split: Split) -> Result<DataInstance, String> {
    let triples = record
        .tripleset
        .iter()
        .map(|t| match t.as_slice() {
            [s, p, o] => Triple::from_raw(s, p, o).map_err(|e| e.to_string()),
            other => Err(format!("triple has {} elements, expected 3", other.len())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let category = record.annotations.iter().find_map(|a| a.source.clone());
    let references = record
        .annotations
        .iter()
        .map(|a| clean_text(&a.text))
        .filter(|t| !t.is_empty())
        .collect();
    DataInstance::new(id, triples, references, category, split).map_err(|e| e.to_string())
}

/// Splits an E2E meaning representation like `name[The Vaults], eatType[pub]`
/// into attribute/value pairs.
pub fn parse_mr(mr: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    let mut rest = mr.trim();
    while !rest.is_empty() {
        let open = rest
            .find('[')
            .ok_or_else(|| format!("attribute {rest:?} has no value bracket"))?;
        let close = rest[open..]
            .find(']')
            .map(|i| i + open)
            .ok_or_else(|| format!("unbalanced brackets in {mr:?}"))?;
        let attr = rest[..open].trim();
        let value = &rest[open + 1..close];
        if value.contains('[') {
            return Err(format!("unbalanced brackets in {mr:?}"));
        }
        if attr.is_empty() {
            return Err(format!("value [{value}] has no attribute name"));
        }
        pairs.push((attr.to_string(), value.trim().to_string()));
        rest = rest[close + 1..].trim_start();
        if let Some(after) = rest.strip_prefix(',') {
            rest = after.trim_start();
        } else if !rest.is_empty() {
            return Err(format!("expected ',' after {attr}[{value}] in {mr:?}"));
        }
    }
    Ok(pairs)
}

/// Parses an E2E CSV (`mr`, `ref` columns). Rows sharing an identical MR are
/// merged into one multi-reference instance, in first-seen order; duplicate
/// reference strings are kept.
pub fn parse_e2e(csv_bytes: &[u8], options: &ParseOptions) -> Result<ParseOutcome, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(csv_bytes);
    let headers = reader.headers()?.clone();
    let column = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
    };
    let mr_col = column(&["mr", "meaning_representation"]).ok_or(CorpusError::MissingColumn("mr"))?;
    let ref_col = column(&["ref", "human_reference"]);

    let mut out = ParseOutcome::default();
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (row_index, row) in reader.records().enumerate() {
        let row = row?;
        out.source_records += 1;
        let Some(mr) = row.get(mr_col).map(str::trim) else {
            out.errors.push(RecordError::new(format!("row-{}", row_index + 1), "missing MR"));
            continue;
        };
        let reference = ref_col
            .and_then(|c| row.get(c))
            .map(clean_text)
            .filter(|r| !r.is_empty());
        let entry = groups.entry(mr.to_string()).or_insert_with(|| {
            order.push(mr.to_string());
            Vec::new()
        });
        entry.extend(reference);
    }

    for (index, mr) in order.iter().enumerate() {
        let id = format!("e2e-{index}");
        let references = groups.remove(mr).unwrap_or_default();
        match e2e_instance(mr, &id, references, options.split, &mut out.warnings) {
            Ok(inst) => out.instances.push(inst),
            Err(message) => out.errors.push(RecordError::new(id, message)),
        }
    }
    // Rows folded into an earlier MR count as skipped records.
    out.skipped = out.source_records - order.len();
    out.finish(options)
}

fn e2e_instance(
    mr: &str,
    id: &str,
    references: Vec<String>,
    split: Split,
    warnings: &mut Vec<String>,
) -> Result<DataInstance, String> {
    let pairs = parse_mr(mr)?;
    let subject_index = match pairs.iter().position(|(a, _)| a == "name") {
        Some(i) => i,
        None => {
            warnings.push(format!("{id}: MR has no name attribute, using first value as subject"));
            0
        }
    };
    let subject = &pairs
        .get(subject_index)
        .ok_or_else(|| "empty MR".to_string())?
        .1;
    let triples = pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != subject_index)
        .map(|(_, (attr, value))| Triple::from_raw(subject, attr, value))
        .collect::<Result<Vec<_>, ModelError>>()
        .map_err(|e| e.to_string())?;
    DataInstance::new(id, triples, references, None, split).map_err(|e| e.to_string())
}

/// Serializes instances as canonical JSONL: one object per line with keys in
/// the fixed order `id, triples, references, category, split`.
pub fn write_canonical(instances: &[DataInstance]) -> Vec<u8> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, inst).expect("instances serialize infallibly");
        out.push(b'\n');
    }
    out
}

pub fn read_canonical(jsonl: &[u8]) -> Result<Vec<DataInstance>, CorpusError> {
    let text = String::from_utf8_lossy(jsonl);
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: DataInstance = serde_json::from_str(line)
            .map_err(|source| CorpusError::CanonicalLine { line: i + 1, source })?;
        instances.push(inst);
    }
    let mut seen = HashSet::new();
    let mut dupes = BTreeSet::new();
    for inst in &instances {
        if !seen.insert(inst.id()) {
            dupes.insert(inst.id().to_string());
        }
    }
    if !dupes.is_empty() {
        return Err(CorpusError::DuplicateIds(dupes.into_iter().collect()));
    }
    Ok(instances)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_canonical(path: &Path) -> Result<Vec<DataInstance>, CorpusError> {
    read_canonical(&read_file(path)?)
}

pub fn save_canonical(path: &Path, instances: &[DataInstance]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&write_canonical(instances)).map_err(io_err)
}

pub fn predicate_set<'a>(instances: impl IntoIterator<Item = &'a DataInstance>) -> BTreeSet<&'a str> {
    instances
        .into_iter()
        .flat_map(|inst| inst.predicates())
        .collect()
}

/// Test instances whose every predicate is absent from train and validation.
/// Predicates compare case-sensitively in their normalized form.
pub fn build_unseen_predicate_split(
    train: &[DataInstance],
    validation: &[DataInstance],
    test: &[DataInstance],
) -> Vec<DataInstance> {
    let seen = predicate_set(train.iter().chain(validation));
    test.iter()
        .filter(|inst| inst.predicates().all(|p| !seen.contains(p)))
        .cloned()
        .map(|inst| inst.with_split(Split::TestUnseen))
        .collect()
}

/// Uniform sample of `k` instances without replacement. The pool is sorted by
/// id first, so the result depends only on the set of instances and the seed.
pub fn sample_few_shot(
    train: &[DataInstance],
    k: usize,
    seed: u64,
) -> Result<Vec<DataInstance>, CorpusError> {
    if k > train.len() {
        return Err(CorpusError::SampleTooLarge {
            k,
            available: train.len(),
        });
    }
    let mut pool: Vec<&DataInstance> = train.iter().collect();
    pool.sort_by(|a, b| a.id().cmp(b.id()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}
