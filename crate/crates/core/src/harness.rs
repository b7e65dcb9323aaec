//! Experiment orchestration: config-driven end-to-end runs, experiment grids
//! over shot counts, training-pair export and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    map_bounded, BackendConfig, CompletionBackend, GenerationBackend, HttpBackend, IdentityBackend,
    MockBackend, TableEchoBackend, UnknownRequestPolicy,
};
use crate::corpus::{self, CorpusError, CorpusManifest, ParseOptions};
use crate::disambiguation::{
    disambiguate, ensure_templates, load_manual_templates, DisambiguationError, PromptSpec,
    TemplateStore,
};
use crate::fusion::{
    build_fusion_input, fuse, generate_from_linearized, linearize_baseline, FusionError,
    FusionRequest, FUSION_PREFIX,
};
use crate::metrics::{evaluate, EvalConfig, MetricError, MetricReport};
use crate::model::{DataInstance, DecodeConfig, DisambiguatedSentence, Split};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Disambiguation(#[from] DisambiguationError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("backend setup: {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line} of {path}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("run failed at stage {stage}: {message} (manifest: {manifest})")]
    StageFailed {
        stage: String,
        message: String,
        manifest: PathBuf,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Template disambiguation followed by sentence fusion.
    TwoStage,
    /// Marker-linearized triples sent straight to the generation model.
    BaselineLinearized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ShotsKeyword {
    Full,
}

/// Number of labeled training examples: a count or the whole train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shots {
    Count(usize),
    #[serde(with = "full_shots")]
    Full,
}

mod full_shots {
    use super::ShotsKeyword;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        ShotsKeyword::Full.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        ShotsKeyword::deserialize(d).map(|_| ())
    }
}

impl Shots {
    pub fn is_zero(self) -> bool {
        self == Shots::Count(0)
    }
}

/// Where a stage's model answers come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Http {
        #[serde(flatten)]
        config: BackendConfig,
    },
    Mock {
        fixture: PathBuf,
        #[serde(default)]
        unknown: UnknownRequestPolicy,
    },
    /// Generation: echo the input without its task prefix.
    Identity,
    /// Completion: echo the queried table row as a sentence.
    TableEcho,
    /// Completion: no LLM; missing predicates get fallback templates.
    Offline,
}

impl BackendSpec {
    fn resolve_paths(&mut self, base: &Path) {
        if let BackendSpec::Mock { fixture, .. } = self {
            *fixture = resolve(base, fixture);
        }
    }

    pub fn completion(&self) -> Result<Option<Box<dyn CompletionBackend>>, HarnessError> {
        Ok(match self {
            BackendSpec::Http { config } => Some(Box::new(HttpBackend::new(config.clone()))),
            BackendSpec::Mock { fixture, unknown } => {
                Some(Box::new(MockBackend::from_fixture(fixture, *unknown)?))
            }
            BackendSpec::TableEcho => Some(Box::new(TableEchoBackend)),
            BackendSpec::Offline => None,
            BackendSpec::Identity => {
                return Err(HarnessError::Config {
                    path: "disambiguation_backend".into(),
                    message: "identity backend only serves generation requests".into(),
                })
            }
        })
    }

    pub fn generation(&self) -> Result<Box<dyn GenerationBackend>, HarnessError> {
        Ok(match self {
            BackendSpec::Http { config } => Box::new(HttpBackend::new(config.clone())),
            BackendSpec::Mock { fixture, unknown } => {
                Box::new(MockBackend::from_fixture(fixture, *unknown)?)
            }
            BackendSpec::Identity => Box::new(IdentityBackend),
            BackendSpec::TableEcho | BackendSpec::Offline => {
                return Err(HarnessError::Config {
                    path: "fusion_backend".into(),
                    message: "fusion needs a generation backend (http, mock or identity)".into(),
                })
            }
        })
    }
}

fn default_eval_split() -> String {
    "test".into()
}
fn default_parallelism() -> usize {
    4
}
fn default_error_budget() -> f64 {
    0.01
}

/// One experiment. Relative paths are resolved against the config file's
/// directory by [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub corpus: CorpusManifest,
    #[serde(default = "default_eval_split")]
    pub eval_split: String,
    /// Split few-shot examples are drawn from. Unused when `shots` is 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_split: Option<String>,
    pub shots: Shots,
    pub seed: u64,
    pub template_store: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual_templates: Option<PathBuf>,
    pub disambiguation_backend: BackendSpec,
    pub fusion_backend: BackendSpec,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub prompt: PromptSpec,
    pub mode: Mode,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Categories (for DART, the annotation source) dropped from the eval split.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude_categories: Vec<String>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_error_budget")]
    pub error_budget: f64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn from_json(json: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut config: RunConfig = serde_json::from_str(json).map_err(|e| HarnessError::Config {
            path: base_dir.display().to_string(),
            message: e.to_string(),
        })?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let json = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_json(&json, base).map_err(|e| match e {
            HarnessError::Config { message, .. } => HarnessError::Config {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.corpus.splits.values_mut() {
            *p = resolve(base, p);
        }
        self.template_store = resolve(base, &self.template_store);
        if let Some(m) = &mut self.manual_templates {
            *m = resolve(base, m);
        }
        self.output_dir = resolve(base, &self.output_dir);
        self.disambiguation_backend.resolve_paths(base);
        self.fusion_backend.resolve_paths(base);
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |message: String| HarnessError::Config {
            path: self.name.clone(),
            message,
        };
        self.decode.validate().map_err(|e| bad(e.to_string()))?;
        if !self.corpus.splits.contains_key(&self.eval_split) {
            return Err(bad(format!("corpus has no split {:?}", self.eval_split)));
        }
        if !self.shots.is_zero() {
            let train = self
                .train_split
                .as_ref()
                .ok_or_else(|| bad("shots > 0 requires train_split".into()))?;
            if !self.corpus.splits.contains_key(train) {
                return Err(bad(format!("corpus has no split {train:?}")));
            }
        }
        if self.parallelism == 0 {
            return Err(bad("parallelism must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.parent_lambda) {
            return Err(bad("eval.parent_lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One config per shot count. Seeds are `base.seed + index`, outputs go to
/// `<output_dir>/shots-<n>`, and the zero-shot config carries no train split.
pub fn make_experiment_grid(base: &RunConfig, shots: &[usize]) -> Vec<RunConfig> {
    shots
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut config = base.clone();
            config.name = format!("{}-shots-{n}", base.name);
            config.shots = Shots::Count(n);
            config.seed = base.seed + i as u64;
            config.output_dir = base.output_dir.join(format!("shots-{n}"));
            if n == 0 {
                config.train_split = None;
            }
            config
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub pairs: usize,
    pub skipped_unlabeled: usize,
}

/// Fusion training pairs: one per reference, with the disambiguated fusion
/// input as source.
pub fn fusion_training_pairs(
    instances: &[DataInstance],
    store: &TemplateStore,
) -> Result<(Vec<TrainingPair>, ExportSummary), HarnessError> {
    let mut pairs = Vec::new();
    let mut summary = ExportSummary::default();
    for inst in instances {
        if !inst.is_labeled() {
            summary.skipped_unlabeled += 1;
            continue;
        }
        let sentences: Vec<String> = disambiguate(inst, store)?.into_iter().map(|s| s.text).collect();
        let source = build_fusion_input(&sentences)?;
        for reference in inst.references() {
            pairs.push(TrainingPair {
                source: source.clone(),
                target: reference.clone(),
            });
        }
    }
    summary.pairs = pairs.len();
    Ok((pairs, summary))
}

fn linearized_training_pairs(instances: &[DataInstance]) -> (Vec<TrainingPair>, ExportSummary) {
    let mut summary = ExportSummary::default();
    let mut pairs = Vec::new();
    for inst in instances {
        if !inst.is_labeled() {
            summary.skipped_unlabeled += 1;
            continue;
        }
        let source = linearize_baseline(inst);
        pairs.extend(inst.references().iter().map(|r| TrainingPair {
            source: source.clone(),
            target: r.clone(),
        }));
    }
    summary.pairs = pairs.len();
    (pairs, summary)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| HarnessError::Record {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes fusion training pairs for `instances` to `out` and returns the
/// summary. Unlabeled instances are skipped and counted.
pub fn export_fusion_training_pairs(
    instances: &[DataInstance],
    store: &TemplateStore,
    out: &Path,
) -> Result<ExportSummary, HarnessError> {
    let (pairs, summary) = fusion_training_pairs(instances, store)?;
    write_jsonl(out, &pairs)?;
    Ok(summary)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExternalPair {
    Pair { source: String, target: String },
    Split { sents: Vec<String>, text: String },
}

/// Copies a pre-split pair file into the pair format. Lines may already be
/// `{source, target}` or carry split sentences as `{sents, text}`; sources
/// without the fusion prefix get one.
pub fn passthrough_pairs(input: &Path, out: &Path) -> Result<ExportSummary, HarnessError> {
    let rows: Vec<ExternalPair> = read_jsonl(input)?;
    let pairs = rows
        .into_iter()
        .map(|row| {
            Ok(match row {
                ExternalPair::Pair { source, target } => TrainingPair {
                    source: if source.starts_with(FUSION_PREFIX) {
                        source
                    } else {
                        format!("{FUSION_PREFIX}{source}")
                    },
                    target,
                },
                ExternalPair::Split { sents, text } => TrainingPair {
                    source: build_fusion_input(&sents)?,
                    target: text,
                },
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    write_jsonl(out, &pairs)?;
    Ok(ExportSummary {
        pairs: pairs.len(),
        skipped_unlabeled: 0,
    })
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a store's templates, ignoring creation timestamps.
pub fn template_store_hash(store: &TemplateStore) -> String {
    let content: BTreeMap<&str, (&str, Option<&crate::model::Triple>, crate::model::Provenance)> =
        store
            .entries()
            .map(|(p, e)| {
                (
                    p,
                    (
                        e.template.pattern(),
                        e.template.source_triple(),
                        e.template.provenance(),
                    ),
                )
            })
            .collect();
    sha256_hex(serde_json::to_string(&content).expect("store serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub text: String,
}

/// Reads hypotheses from `{id, text}` JSONL, or from plain text with one line
/// per instance in corpus order.
pub fn read_hypotheses(path: &Path, instances: &[DataInstance]) -> Result<Vec<Hypothesis>, HarnessError> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return read_jsonl(path);
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != instances.len() {
        return Err(HarnessError::Record {
            path: path.display().to_string(),
            line: lines.len(),
            message: format!("{} lines for {} instances", lines.len(), instances.len()),
        });
    }
    Ok(instances
        .iter()
        .zip(lines)
        .map(|(inst, line)| Hypothesis {
            id: inst.id().to_string(),
            text: line.to_string(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizedRecord {
    pub id: String,
    pub sentences: Vec<DisambiguatedSentence>,
    pub input: String,
}

pub fn verbalize(
    instances: &[DataInstance],
    store: &TemplateStore,
) -> Result<Vec<VerbalizedRecord>, HarnessError> {
    instances
        .iter()
        .map(|inst| {
            let sentences = disambiguate(inst, store)?;
            let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
            Ok(VerbalizedRecord {
                id: inst.id().to_string(),
                input: build_fusion_input(&texts)?,
                sentences,
            })
        })
        .collect()
}

/// A generation input keyed by instance id, as produced by `verbalize` or
/// `linearize`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationInput {
    pub id: String,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum InstanceStatus {
    Ok,
    Failed { stage: String, error: String },
}

/// Runs generation for every input with at most `parallelism` requests in
/// flight. Inputs with the fusion prefix go through [`fuse`]; others are
/// treated as linearized baseline inputs. Failures yield empty text.
pub fn generate_all(
    inputs: &[GenerationInput],
    decode: &DecodeConfig,
    backend: &dyn GenerationBackend,
    parallelism: usize,
) -> Vec<(Hypothesis, InstanceStatus)> {
    map_bounded(inputs, parallelism, |item| {
        let result = if item.input.starts_with(FUSION_PREFIX) {
            FusionRequest::new(item.input.clone(), decode.clone()).and_then(|r| fuse(&r, backend))
        } else {
            generate_from_linearized(&item.input, decode, backend)
        };
        match result {
            Ok(text) => (
                Hypothesis {
                    id: item.id.clone(),
                    text,
                },
                InstanceStatus::Ok,
            ),
            Err(e) => (
                Hypothesis {
                    id: item.id.clone(),
                    text: String::new(),
                },
                InstanceStatus::Failed {
                    stage: "generate".into(),
                    error: e.to_string(),
                },
            ),
        }
    })
}

/// Which stage touched which corpus file, and whether it used gold text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub stage: String,
    pub path: PathBuf,
    pub references_used: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub eval_instances: usize,
    pub excluded_instances: usize,
    pub missing_predicates: usize,
    pub disambiguation_queries: usize,
    pub templates_mined: usize,
    pub template_fallbacks: usize,
    pub generation_requests: usize,
    pub instances_ok: usize,
    pub instances_failed: usize,
    pub training_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIdentities {
    pub disambiguation: String,
    pub fusion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hypotheses: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    #[serde(flatten)]
    pub status: InstanceStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub corpus_hashes: BTreeMap<String, String>,
    pub template_store_hash: Option<String>,
    pub backends: BackendIdentities,
    pub few_shot_ids: Vec<String>,
    pub counters: RunCounters,
    pub instances: Vec<InstanceRecord>,
    pub file_access: Vec<AccessRecord>,
    pub outputs: RunOutputs,
    pub failure: Option<StageFailure>,
    pub started_at: String,
    pub finished_at: String,
    pub wall_clock_ms: u128,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut json = serde_json::to_string_pretty(self).expect("manifest serializes");
        json.push('\n');
        json
    }

    /// The manifest with wall-clock fields blanked, for run comparisons.
    pub fn without_timestamps(&self) -> RunManifest {
        RunManifest {
            started_at: String::new(),
            finished_at: String::new(),
            wall_clock_ms: 0,
            ..self.clone()
        }
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct RunState {
    manifest: RunManifest,
    clock: Instant,
}

impl RunState {
    fn manifest_path(&self) -> PathBuf {
        self.manifest.config.output_dir.join("manifest.json")
    }

    fn finish(mut self) -> Result<RunManifest, HarnessError> {
        self.manifest.finished_at = now();
        self.manifest.wall_clock_ms = self.clock.elapsed().as_millis();
        write_atomic(&self.manifest_path(), self.manifest.to_json().as_bytes())?;
        Ok(self.manifest)
    }

    fn fail(mut self, stage: &str, error: HarnessError) -> HarnessError {
        let message = error.to_string();
        self.manifest.failure = Some(StageFailure {
            stage: stage.to_string(),
            message: message.clone(),
        });
        let manifest = self.manifest_path();
        if let Err(e) = self.finish() {
            log::error!("could not write manifest after failure: {e}");
        }
        HarnessError::StageFailed {
            stage: stage.to_string(),
            message,
            manifest,
        }
    }
}

fn load_split(
    config: &RunConfig,
    split: &str,
    tag: Split,
    state: &mut RunState,
) -> Result<(PathBuf, Vec<DataInstance>), HarnessError> {
    let tag = split.parse().unwrap_or(tag);
    let options = ParseOptions::new(tag).with_error_budget(config.error_budget);
    let (path, outcome) = config.corpus.load_split(split, Path::new("."), &options)?;
    let bytes = corpus::read_file(&path)?;
    state
        .manifest
        .corpus_hashes
        .insert(path.display().to_string(), sha256_hex(&bytes));
    Ok((path, outcome.instances))
}

/// Runs one experiment end to end: ingest, template filling, disambiguation,
/// fusion (or the linearized baseline) and evaluation. Writes
/// `hypotheses.jsonl`, `report.json` and `manifest.json` to the output
/// directory. Per-instance generation failures are recorded and the run
/// continues; a failing stage stops the run with its outputs so far kept.
pub fn run_pipeline(config: &RunConfig) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    let completion = config.disambiguation_backend.completion()?;
    let generation = config.fusion_backend.generation()?;
    run_pipeline_with(config, completion.as_deref(), generation.as_ref())
}

/// [`run_pipeline`] with caller-supplied backends; the backend specs in the
/// config are ignored.
pub fn run_pipeline_with(
    config: &RunConfig,
    completion: Option<&dyn CompletionBackend>,
    generation: &dyn GenerationBackend,
) -> Result<RunManifest, HarnessError> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
    let mut state = RunState {
        manifest: RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config: config.clone(),
            corpus_hashes: BTreeMap::new(),
            template_store_hash: None,
            backends: BackendIdentities {
                disambiguation: String::new(),
                fusion: String::new(),
            },
            few_shot_ids: Vec::new(),
            counters: RunCounters::default(),
            instances: Vec::new(),
            file_access: Vec::new(),
            outputs: RunOutputs::default(),
            failure: None,
            started_at: now(),
            finished_at: String::new(),
            wall_clock_ms: 0,
        },
        clock: Instant::now(),
    };

    macro_rules! stage {
        ($name:expr, $body:expr) => {
            match $body {
                Ok(v) => v,
                Err(e) => return Err(state.fail($name, e.into())),
            }
        };
    }

    state.manifest.backends = BackendIdentities {
        disambiguation: completion.map_or_else(|| "offline".to_string(), |b| b.identity()),
        fusion: generation.identity(),
    };

    // Ingest.
    let (eval_path, eval_full) = stage!(
        "ingest",
        load_split(config, &config.eval_split, Split::Test, &mut state)
    );
    let before = eval_full.len();
    let eval_instances: Vec<DataInstance> = eval_full
        .into_iter()
        .filter(|i| {
            !i.category()
                .is_some_and(|c| config.exclude_categories.iter().any(|x| x == c))
        })
        .collect();
    state.manifest.counters.eval_instances = eval_instances.len();
    state.manifest.counters.excluded_instances = before - eval_instances.len();
    // Generation only ever sees these reference-free copies.
    let eval_inputs: Vec<DataInstance> =
        eval_instances.iter().map(DataInstance::without_references).collect();
    state.manifest.file_access.push(AccessRecord {
        stage: "generate".into(),
        path: eval_path.clone(),
        references_used: false,
    });

    let train_sample: Vec<DataInstance> = match (config.shots, &config.train_split) {
        (s, _) if s.is_zero() => Vec::new(),
        (shots, Some(train_split)) => {
            let (train_path, train) =
                stage!("ingest", load_split(config, train_split, Split::Train, &mut state));
            let k = match shots {
                Shots::Count(k) => k,
                Shots::Full => train.len(),
            };
            let sample = stage!("sample", corpus::sample_few_shot(&train, k, config.seed));
            state.manifest.few_shot_ids = sample.iter().map(|i| i.id().to_string()).collect();
            state.manifest.file_access.push(AccessRecord {
                stage: "export_pairs".into(),
                path: train_path,
                references_used: true,
            });
            sample
        }
        (_, None) => unreachable!("validated: shots > 0 has a train split"),
    };

    // Templates. Few-shot training instances need templates for pair export.
    let mut store = TemplateStore::new();
    if config.mode == Mode::TwoStage {
        store = stage!("templates", TemplateStore::load(&config.template_store));
        if let Some(manual) = &config.manual_templates {
            let manual = stage!("templates", load_manual_templates(manual));
            for (_, entry) in manual.entries() {
                store.insert_with_timestamp(entry.template.clone(), entry.created_at.clone());
            }
        }
        let mut corpus_for_templates = train_sample.clone();
        corpus_for_templates.extend(eval_inputs.iter().cloned());
        let report = ensure_templates(
            &corpus_for_templates,
            &mut store,
            completion,
            &config.prompt,
            config.parallelism,
        );
        let counters = &mut state.manifest.counters;
        counters.missing_predicates = report.missing.len();
        counters.disambiguation_queries = report.backend_calls;
        counters.templates_mined = report.mined;
        counters.template_fallbacks = report.fallbacks();
        stage!("templates", store.save(&config.template_store));
        state.manifest.template_store_hash = Some(template_store_hash(&store));
    }

    // Training pairs for the fusion model.
    if !train_sample.is_empty() {
        let pairs_path = config.output_dir.join("train_pairs.jsonl");
        let (pairs, summary) = match config.mode {
            Mode::TwoStage => stage!("export_pairs", fusion_training_pairs(&train_sample, &store)),
            Mode::BaselineLinearized => linearized_training_pairs(&train_sample),
        };
        stage!("export_pairs", write_jsonl(&pairs_path, &pairs));
        state.manifest.counters.training_pairs = summary.pairs;
        state.manifest.outputs.training_pairs = Some(pairs_path);
    }

    // Disambiguation + fusion input, or linearization.
    let mut inputs = Vec::with_capacity(eval_inputs.len());
    let mut statuses: BTreeMap<String, InstanceStatus> = BTreeMap::new();
    for inst in &eval_inputs {
        let input = match config.mode {
            Mode::TwoStage => disambiguate(inst, &store)
                .map_err(HarnessError::from)
                .and_then(|sentences| {
                    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
                    Ok(build_fusion_input(&texts)?)
                }),
            Mode::BaselineLinearized => Ok(linearize_baseline(inst)),
        };
        match input {
            Ok(input) => inputs.push(GenerationInput {
                id: inst.id().to_string(),
                input,
            }),
            Err(e) => {
                statuses.insert(
                    inst.id().to_string(),
                    InstanceStatus::Failed {
                        stage: "disambiguate".into(),
                        error: e.to_string(),
                    },
                );
            }
        }
    }

    let generated = generate_all(&inputs, &config.decode, generation, config.parallelism);
    state.manifest.counters.generation_requests = inputs.len();
    let mut texts: BTreeMap<String, String> = BTreeMap::new();
    for (hyp, status) in generated {
        statuses.insert(hyp.id.clone(), status);
        texts.insert(hyp.id, hyp.text);
    }
    let hypotheses: Vec<Hypothesis> = eval_inputs
        .iter()
        .map(|inst| Hypothesis {
            id: inst.id().to_string(),
            text: texts.get(inst.id()).cloned().unwrap_or_default(),
        })
        .collect();
    let hyp_path = config.output_dir.join("hypotheses.jsonl");
    stage!("write_hypotheses", write_jsonl(&hyp_path, &hypotheses));
    state.manifest.outputs.hypotheses = Some(hyp_path);
    state.manifest.instances = eval_inputs
        .iter()
        .map(|inst| InstanceRecord {
            id: inst.id().to_string(),
            status: statuses.remove(inst.id()).unwrap_or(InstanceStatus::Ok),
        })
        .collect();
    let failed = state
        .manifest
        .instances
        .iter()
        .filter(|r| r.status != InstanceStatus::Ok)
        .count();
    state.manifest.counters.instances_failed = failed;
    state.manifest.counters.instances_ok = state.manifest.instances.len() - failed;

    // Evaluation over the labeled part of the eval split.
    let labeled: Vec<DataInstance> = eval_instances.iter().filter(|i| i.is_labeled()).cloned().collect();
    if !labeled.is_empty() {
        let pairs: Vec<(String, String)> = hypotheses
            .iter()
            .filter(|h| labeled.iter().any(|i| i.id() == h.id))
            .map(|h| (h.id.clone(), h.text.clone()))
            .collect();
        let report: MetricReport = stage!("evaluate", evaluate(&pairs, &labeled, &config.eval));
        state.manifest.file_access.push(AccessRecord {
            stage: "evaluate".into(),
            path: eval_path,
            references_used: true,
        });
        let report_path = config.output_dir.join("report.json");
        stage!("evaluate", write_atomic(&report_path, report.to_json().as_bytes()));
        state.manifest.outputs.report = Some(report_path);
    }

    state.finish()
}
