//! Evaluation metrics: corpus BLEU and table-grounded PARENT.
//!
//! BLEU follows the multi-bleu convention: clipped n-gram counts summed over
//! the corpus, no smoothing, and a brevity penalty against the reference
//! length closest to each hypothesis (ties go to the shorter reference).
//!
//! PARENT uses the word-overlap entailment model. An n-gram is entailed by
//! the table with probability equal to the share of its tokens found among
//! the table's tokens. N-gram orders longer than the text are left out of
//! the geometric means, so short texts can still score 1.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{predicate_words, DataInstance};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{hyps} hypotheses but {refs} reference sets")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("hypothesis {0} has no references")]
    NoReferences(usize),
    #[error("lambda weight {0} outside [0, 1]")]
    Lambda(f64),
    #[error("unmatched ids: {}", .0.join(", "))]
    UnmatchedIds(Vec<String>),
    #[error("duplicate hypothesis id {0:?}")]
    DuplicateHypothesis(String),
    #[error("external metric {name}: {message}")]
    External { name: String, message: String },
}

/// Lowercases, splits on whitespace, and makes every punctuation or symbol
/// character its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

// Ordered so floating-point sums over n-grams are reproducible.
fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut counts = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// Score on the 0–100 scale.
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

/// Corpus-level BLEU over tokenized hypotheses and their references.
pub fn corpus_bleu<T: AsRef<str>>(
    hyps: &[Vec<T>],
    refs_list: &[Vec<Vec<T>>],
    max_n: usize,
) -> Result<BleuScore, MetricError> {
    if hyps.len() != refs_list.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs_list.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (i, (hyp, refs)) in hyps.iter().zip(refs_list).enumerate() {
        if refs.is_empty() {
            return Err(MetricError::NoReferences(i));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
            .expect("non-empty references");
        for n in 1..=max_n {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref: BTreeMap<&Vec<&str>, usize> = BTreeMap::new();
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for counts in &ref_counts {
                for (gram, &c) in counts {
                    if hyp_counts.contains_key(gram) {
                        let slot = max_ref.entry(gram).or_insert(0);
                        *slot = (*slot).max(c);
                    }
                }
            }
            for (gram, &c) in &hyp_counts {
                total[n - 1] += c;
                correct[n - 1] += c.min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let precisions: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        (100.0 * brevity_penalty * log_mean.exp()).clamp(0.0, 100.0)
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hypothesis_length: hyp_len,
        reference_length: ref_len,
    })
}

/// One hypothesis with its references and table, all tokenized.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalExample {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
    /// Token sequences making up the table's vocabulary for entailment.
    pub table_values: Vec<Vec<String>>,
    /// Per-record values the hypothesis should mention (table recall).
    pub table_entries: Vec<Vec<String>>,
}

impl EvalExample {
    /// Builds an example from an instance. Table values are each triple's
    /// subject, predicate words and object; the table-recall entry of a triple
    /// is its subject followed by its object.
    pub fn from_instance(hypothesis: &str, instance: &DataInstance) -> Self {
        let mut table_values = Vec::new();
        let mut table_entries = Vec::new();
        for t in instance.triples() {
            let subject = tokenize(t.subject());
            let object = tokenize(t.object());
            table_values.push(subject.clone());
            table_values.push(tokenize(&predicate_words(t.predicate())));
            table_values.push(object.clone());
            table_entries.push([subject, object].concat());
        }
        EvalExample {
            hypothesis: tokenize(hypothesis),
            references: instance.references().iter().map(|r| tokenize(r)).collect(),
            table_values,
            table_entries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParentScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn geometric_mean(values: &[f64]) -> f64 {
    if values.contains(&0.0) {
        return 0.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

fn longest_common_subsequence(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

const MAX_ORDER: usize = 4;

fn parent_against_reference(
    hypothesis: &[String],
    reference: &[String],
    table_tokens: &HashSet<&str>,
    table_recall: f64,
    lambda: f64,
) -> ParentScore {
    let entailment = |gram: &[&str]| {
        gram.iter().filter(|t| table_tokens.contains(*t)).count() as f64 / gram.len() as f64
    };

    let mut precisions = Vec::new();
    for n in 1..=MAX_ORDER.min(hypothesis.len()) {
        let hyp_counts = ngram_counts(hypothesis, n);
        let ref_counts = ngram_counts(reference, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (gram, &count) in &hyp_counts {
            let in_ref = (ref_counts.get(gram).copied().unwrap_or(0) as f64 / count as f64).min(1.0);
            num += count as f64 * (in_ref + (1.0 - in_ref) * entailment(gram));
            den += count as f64;
        }
        precisions.push(num / den);
    }
    let precision = if precisions.is_empty() {
        0.0
    } else {
        geometric_mean(&precisions)
    };

    let mut ref_recalls = Vec::new();
    for n in 1..=MAX_ORDER.min(reference.len()) {
        let hyp_counts = ngram_counts(hypothesis, n);
        let ref_counts = ngram_counts(reference, n);
        let (mut num, mut den) = (0.0, 0.0);
        for (gram, &count) in &ref_counts {
            let weight = entailment(gram);
            let in_hyp = (hyp_counts.get(gram).copied().unwrap_or(0) as f64 / count as f64).min(1.0);
            num += count as f64 * weight * in_hyp;
            den += count as f64 * weight;
        }
        ref_recalls.push(if den == 0.0 { 1.0 } else { num / den });
    }
    let ref_recall = if ref_recalls.is_empty() {
        1.0
    } else {
        geometric_mean(&ref_recalls)
    };

    let recall = ref_recall.powf(1.0 - lambda) * table_recall.powf(lambda);
    ParentScore {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    }
}

/// PARENT for one example. With several references the best-F1 reference
/// wins (the first one on ties).
pub fn parent_instance(example: &EvalExample, lambda: f64) -> Result<ParentScore, MetricError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MetricError::Lambda(lambda));
    }
    let table_tokens: HashSet<&str> = example
        .table_values
        .iter()
        .flatten()
        .map(String::as_str)
        .collect();
    let entries: Vec<&Vec<String>> = example.table_entries.iter().filter(|e| !e.is_empty()).collect();
    let table_recall = if entries.is_empty() {
        1.0
    } else {
        entries
            .iter()
            .map(|e| longest_common_subsequence(e, &example.hypothesis) as f64 / e.len() as f64)
            .sum::<f64>()
            / entries.len() as f64
    };

    let mut best: Option<ParentScore> = None;
    for reference in &example.references {
        let score = parent_against_reference(
            &example.hypothesis,
            reference,
            &table_tokens,
            table_recall,
            lambda,
        );
        if best.is_none_or(|b| score.f1 > b.f1) {
            best = Some(score);
        }
    }
    best.ok_or(MetricError::NoReferences(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentCorpusScore {
    /// Mean of instance precisions.
    pub precision: f64,
    /// Mean of instance recalls.
    pub recall: f64,
    /// Harmonic mean of the corpus precision and recall.
    pub f1: f64,
    /// Mean of instance F1 values.
    pub f1_instance_mean: f64,
    pub per_instance: Vec<ParentScore>,
}

pub fn parent_scores(examples: &[EvalExample], lambda: f64) -> Result<ParentCorpusScore, MetricError> {
    if examples.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let per_instance = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            parent_instance(ex, lambda).map_err(|e| match e {
                MetricError::NoReferences(_) => MetricError::NoReferences(i),
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = per_instance.len() as f64;
    let precision = per_instance.iter().map(|s| s.precision).sum::<f64>() / n;
    let recall = per_instance.iter().map(|s| s.recall).sum::<f64>() / n;
    Ok(ParentCorpusScore {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
        f1_instance_mean: per_instance.iter().map(|s| s.f1).sum::<f64>() / n,
        per_instance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub parent_lambda: f64,
    pub bleu_max_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            parent_lambda: 0.5,
            bleu_max_n: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub instances: usize,
    pub hypothesis_tokens: usize,
    pub reference_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub bleu: f64,
    pub bleu_precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub parent_precision: f64,
    pub parent_recall: f64,
    pub parent_f1: f64,
    pub parent_f1_instance_mean: f64,
    pub parent_lambda: f64,
    pub counts: TokenCounts,
    pub per_instance: Vec<InstanceScore>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        json
    }
}

/// Scores hypotheses (`id → text`) against labeled instances. Every instance
/// needs exactly one hypothesis and vice versa. Instances are processed in id
/// order, so input order does not affect any score.
pub fn evaluate(
    hypotheses: &[(String, String)],
    instances: &[DataInstance],
    config: &EvalConfig,
) -> Result<MetricReport, MetricError> {
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for (id, text) in hypotheses {
        if by_id.insert(id, text).is_some() {
            return Err(MetricError::DuplicateHypothesis(id.clone()));
        }
    }
    let mut sorted: Vec<&DataInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));

    let instance_ids: HashSet<&str> = sorted.iter().map(|i| i.id()).collect();
    let mut unmatched: Vec<String> = sorted
        .iter()
        .filter(|i| !by_id.contains_key(i.id()))
        .map(|i| i.id().to_string())
        .collect();
    unmatched.extend(
        by_id
            .keys()
            .filter(|id| !instance_ids.contains(*id))
            .map(|id| id.to_string()),
    );
    if !unmatched.is_empty() {
        return Err(MetricError::UnmatchedIds(unmatched));
    }

    let examples: Vec<EvalExample> = sorted
        .iter()
        .map(|inst| EvalExample::from_instance(by_id[inst.id()], inst))
        .collect();
    if let Some(i) = examples.iter().position(|e| e.references.is_empty()) {
        return Err(MetricError::NoReferences(i));
    }
    let hyps: Vec<Vec<String>> = examples.iter().map(|e| e.hypothesis.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| e.references.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs, config.bleu_max_n)?;
    let parent = parent_scores(&examples, config.parent_lambda)?;

    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        bleu: bleu.score,
        bleu_precisions: bleu.precisions,
        brevity_penalty: bleu.brevity_penalty,
        parent_precision: parent.precision,
        parent_recall: parent.recall,
        parent_f1: parent.f1,
        parent_f1_instance_mean: parent.f1_instance_mean,
        parent_lambda: config.parent_lambda,
        counts: TokenCounts {
            instances: examples.len(),
            hypothesis_tokens: bleu.hypothesis_length,
            reference_tokens: bleu.reference_length,
        },
        per_instance: sorted
            .iter()
            .zip(&parent.per_instance)
            .map(|(inst, s)| InstanceScore {
                id: inst.id().to_string(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            })
            .collect(),
    })
}

/// Hook for metrics computed by outside tools (METEOR, BERTScore, BLEURT).
pub trait ExternalMetric {
    fn name(&self) -> &str;
    fn score(&self, hypotheses: &[String], references: &[Vec<String>]) -> Result<f64, MetricError>;
}

/// Runs an external command with `{hyp}` and `{ref0}`, `{ref1}`, ... argument
/// placeholders replaced by paths to line-aligned text files, and reads the
/// last number printed on stdout.
#[derive(Debug, Clone)]
pub struct CommandMetric {
    pub name: String,
    pub program: String,
    pub args: Vec<String>,
    pub work_dir: PathBuf,
}

impl ExternalMetric for CommandMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, hypotheses: &[String], references: &[Vec<String>]) -> Result<f64, MetricError> {
        let fail = |message: String| MetricError::External {
            name: self.name.clone(),
            message,
        };
        std::fs::create_dir_all(&self.work_dir).map_err(|e| fail(e.to_string()))?;
        let hyp_path = self.work_dir.join("hyp.txt");
        std::fs::write(&hyp_path, hypotheses.join("\n") + "\n").map_err(|e| fail(e.to_string()))?;
        let max_refs = references.iter().map(Vec::len).max().unwrap_or(0);
        let mut ref_paths = Vec::new();
        for k in 0..max_refs {
            let path = self.work_dir.join(format!("ref{k}.txt"));
            let lines: Vec<&str> = references
                .iter()
                .map(|r| r.get(k).map(String::as_str).unwrap_or(""))
                .collect();
            std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| fail(e.to_string()))?;
            ref_paths.push(path);
        }
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                let mut a = a.replace("{hyp}", &hyp_path.to_string_lossy());
                for (k, p) in ref_paths.iter().enumerate() {
                    a = a.replace(&format!("{{ref{k}}}"), &p.to_string_lossy());
                }
                a
            })
            .collect();
        let output = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| fail(e.to_string()))?;
        if !output.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            )));
        }
        String::from_utf8_lossy(&output.stdout)
            .split(|c: char| c.is_whitespace() || c == ',' || c == '=')
            .filter_map(|w| w.parse::<f64>().ok())
            .next_back()
            .ok_or_else(|| fail("no number in output".into()))
    }
}
