//! Independent oracles and data generators shared by the integration tests.
//! Nothing here calls into the metric code under test.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use d2t_core::{DataInstance, Split, Triple};

pub mod criteria;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Line-by-line port of the multi-bleu scoring loop over whitespace tokens.
/// Returns the score on the 0-100 scale.
pub fn multi_bleu(hyps: &[&str], refs: &[Vec<&str>]) -> f64 {
    let mut correct = [0usize; 5];
    let mut total = [0usize; 5];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, sentence_refs) in hyps.iter().zip(refs) {
        let words: Vec<&str> = hyp.split_whitespace().collect();
        let mut ref_ngrams: HashMap<(usize, Vec<&str>), usize> = HashMap::new();
        let (mut closest_diff, mut closest_len) = (9999usize, 9999usize);
        for reference in sentence_refs {
            let rw: Vec<&str> = reference.split_whitespace().collect();
            let diff = words.len().abs_diff(rw.len());
            if diff < closest_diff {
                closest_diff = diff;
                closest_len = rw.len();
            } else if diff == closest_diff && rw.len() < closest_len {
                closest_len = rw.len();
            }
            for n in 1..=4 {
                let mut local: HashMap<(usize, Vec<&str>), usize> = HashMap::new();
                let mut start = 0;
                while start + n <= rw.len() {
                    *local.entry((n, rw[start..start + n].to_vec())).or_default() += 1;
                    start += 1;
                }
                for (k, v) in local {
                    let slot = ref_ngrams.entry(k).or_default();
                    if *slot < v {
                        *slot = v;
                    }
                }
            }
        }
        hyp_len += words.len();
        ref_len += closest_len;
        for n in 1..=4 {
            let mut t: HashMap<Vec<&str>, usize> = HashMap::new();
            let mut start = 0;
            while start + n <= words.len() {
                *t.entry(words[start..start + n].to_vec()).or_default() += 1;
                start += 1;
            }
            for (gram, count) in t {
                total[n] += count;
                if let Some(&r) = ref_ngrams.get(&(n, gram)) {
                    correct[n] += r.min(count);
                }
            }
        }
    }
    if ref_len == 0 || hyp_len == 0 {
        return 0.0;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let my_log = |x: f64| if x == 0.0 { -9_999_999_999.0 } else { x.ln() };
    let logs: f64 = (1..=4)
        .map(|n| {
            let p = if total[n] == 0 { 0.0 } else { correct[n] as f64 / total[n] as f64 };
            my_log(p)
        })
        .sum();
    100.0 * bp * (logs / 4.0).exp()
}

/// Runs the checked-in Perl scorer if a `perl` binary is available. Returns
/// the printed score (two decimals).
pub fn perl_multi_bleu(hyp_file: &Path, ref_stem: &Path) -> Option<f64> {
    let hyp = std::fs::File::open(hyp_file).ok()?;
    let out = Command::new("perl")
        .arg(fixture("multi_bleu.pl"))
        .arg(ref_stem)
        .stdin(hyp)
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    parse_multi_bleu_line(&String::from_utf8_lossy(&out.stdout))
}

pub fn parse_multi_bleu_line(line: &str) -> Option<f64> {
    line.strip_prefix("BLEU = ")?.split(',').next()?.trim().parse().ok()
}

/// A PARENT example described directly as token lists.
#[derive(Debug, Clone)]
pub struct ParentCase {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub table_values: Vec<Vec<String>>,
    pub table_entries: Vec<Vec<String>>,
}

fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

fn in_table(token: &str, table: &[Vec<String>]) -> bool {
    table.iter().any(|v| v.iter().any(|t| t == token))
}

fn entailed(gram: &[String], table: &[Vec<String>]) -> f64 {
    gram.iter().filter(|t| in_table(t, table)).count() as f64 / gram.len() as f64
}

/// Largest subsequence of `entry` that is also a subsequence of `hyp`, by
/// trying every subset of entry positions.
fn brute_lcs(entry: &[String], hyp: &[String]) -> usize {
    let m = entry.len();
    let mut best = 0;
    for mask in 0u32..(1 << m) {
        let picked: Vec<&String> = (0..m).filter(|i| mask & (1 << i) != 0).map(|i| &entry[i]).collect();
        if picked.len() <= best {
            continue;
        }
        let mut it = hyp.iter();
        if picked.iter().all(|p| it.any(|h| h == *p)) {
            best = picked.len();
        }
    }
    best
}

fn nth_root_product(values: &[f64]) -> f64 {
    values.iter().product::<f64>().powf(1.0 / values.len() as f64)
}

/// Scores every hypothesis n-gram position separately rather than grouping
/// identical n-grams. Returns (precision, recall, f1) against each reference.
pub fn brute_parent_per_reference(case: &ParentCase, lambda: f64) -> Vec<(f64, f64, f64)> {
    let hyp = &case.hypothesis;
    let entries: Vec<&Vec<String>> = case.table_entries.iter().filter(|e| !e.is_empty()).collect();
    let table_recall = if entries.is_empty() {
        1.0
    } else {
        entries.iter().map(|e| brute_lcs(e, hyp) as f64 / e.len() as f64).sum::<f64>() / entries.len() as f64
    };
    let mut out = Vec::new();
    for reference in &case.references {
        let mut precisions = Vec::new();
        for n in 1..=4.min(hyp.len()) {
            let positions = hyp.len() - n + 1;
            let mut sum = 0.0;
            for i in 0..positions {
                let gram = &hyp[i..i + n];
                let in_hyp = occurrences(hyp, gram) as f64;
                let in_ref = occurrences(reference, gram) as f64;
                let p_ref = (in_ref / in_hyp).min(1.0);
                sum += p_ref + (1.0 - p_ref) * entailed(gram, &case.table_values);
            }
            precisions.push(sum / positions as f64);
        }
        let precision = if precisions.is_empty() { 0.0 } else { nth_root_product(&precisions) };

        let mut recalls = Vec::new();
        for n in 1..=4.min(reference.len()) {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..reference.len() - n + 1 {
                let gram = &reference[i..i + n];
                let w = entailed(gram, &case.table_values);
                let r = (occurrences(hyp, gram) as f64 / occurrences(reference, gram) as f64).min(1.0);
                num += w * r;
                den += w;
            }
            recalls.push(if den == 0.0 { 1.0 } else { num / den });
        }
        let ref_recall = if recalls.is_empty() { 1.0 } else { nth_root_product(&recalls) };
        let recall = ref_recall.powf(1.0 - lambda) * table_recall.powf(lambda);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        out.push((precision, recall, f1));
    }
    out
}

/// Checks an implementation's (precision, recall, f1) against the oracle.
/// F1 must equal the best oracle F1; precision and recall must match some
/// reference that attains it (ties may resolve to either).
pub fn matches_oracle(case: &ParentCase, lambda: f64, got: (f64, f64, f64), tol: f64) -> Result<(), String> {
    let all = brute_parent_per_reference(case, lambda);
    let best = all.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    if (got.2 - best).abs() > tol {
        return Err(format!("f1 {} vs oracle {best} for {case:?}", got.2));
    }
    let ok = all.iter().any(|s| {
        (s.2 - best).abs() <= tol && (s.0 - got.0).abs() <= tol && (s.1 - got.1).abs() <= tol
    });
    if ok {
        Ok(())
    } else {
        Err(format!("p/r {:?} not among oracle {all:?} for {case:?}", got))
    }
}

const VOCAB: [&str; 9] = ["the", "cat", "sat", "on", "mat", "red", "a", "dog", "ran"];

fn words(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len).map(|_| VOCAB.choose(rng).unwrap().to_string()).collect()
}

/// Random PARENT case with at most six hypothesis tokens.
pub fn random_parent_case(rng: &mut ChaCha8Rng) -> ParentCase {
    let hyp_len = rng.random_range(0..=6);
    let hypothesis = words(rng, hyp_len);
    let n_refs = rng.random_range(1..=3);
    let references = (0..n_refs)
        .map(|_| {
            let len = rng.random_range(1..=7);
            words(rng, len)
        })
        .collect();
    let n_triples = rng.random_range(1..=3);
    let mut table_values = Vec::new();
    let mut table_entries = Vec::new();
    for _ in 0..n_triples {
        let s_len = rng.random_range(1..=2);
        let s = words(rng, s_len);
        let p = words(rng, 1);
        let o_len = rng.random_range(1..=3);
        let o = words(rng, o_len);
        table_entries.push([s.clone(), o.clone()].concat());
        table_values.extend([s, p, o]);
    }
    ParentCase {
        hypothesis,
        references,
        table_values,
        table_entries,
    }
}

/// Deterministic synthetic corpus of `n` instances that together use exactly
/// `predicates` distinct predicates. Every predicate occurs at least once.
pub fn synthetic_corpus(n: usize, predicates: usize, seed: u64) -> Vec<DataInstance> {
    let mut rng = rng(seed);
    let names: Vec<String> = (0..predicates).map(|i| format!("relation{i}Of")).collect();
    (0..n)
        .map(|i| {
            let k = rng.random_range(1..=4);
            let triples = (0..k)
                .map(|j| {
                    let p = if j == 0 && i < predicates {
                        &names[i]
                    } else {
                        names.choose(&mut rng).unwrap()
                    };
                    Triple::new(format!("Entity {i}"), p.clone(), format!("Value {}", rng.random_range(0..1000)))
                        .unwrap()
                })
                .collect();
            DataInstance::new(format!("syn-{i:04}"), triples, vec![], None, Split::Test).unwrap()
        })
        .collect()
}

/// The fixed instance set used for linearization goldens.
pub fn linearization_instances() -> Vec<DataInstance> {
    let rows: [&[(&str, &str, &str)]; 20] = [
        &[("Apollo 11", "operator", "NASA")],
        &[("Alan Shepard", "birthPlace", "New Hampshire")],
        &[("Aarhus Airport", "cityServed", "Aarhus, Denmark")],
        &[("Alan Bean", "nationality", "United States"), ("Alan Bean", "birthPlace", "Wheeler, Texas")],
        &[("Liverpool F.C.", "fastest lap", "Zolder"), ("Zolder", "date", "October 5")],
        &[("Bacon Explosion", "country", "United States"), ("Bacon Explosion", "mainIngredient", "Bacon,sausage"), ("Bacon Explosion", "course", "Main course")],
        &[("A.S. Roma", "ground", "Stadio Olimpico")],
        &[("Mars Hill College", "JOINED", "1973")],
        &[("[TABLECONTEXT]", "[TITLE]", "Saint Lucia"), ("[TABLECONTEXT]", "CAPITAL", "Castries")],
        &[("The Vaults", "eatType", "pub"), ("The Vaults", "near", "Café Adriatic")],
        &[("Abilene Regional Airport", "runwayLength", "2194.0")],
        &[("Alfred Moore Scales", "activeYearsStartDate", "1875-03-04")],
        &[("First Clearing", "location", "On NYS 52 1 Mi. Youngsville")],
        &[("Ottoman Empire", "FOUNDING_YEAR", "1299"), ("Ottoman Empire", "FOUNDER", "Osman I")],
        &[("The Eagle", "food", "Japanese"), ("The Eagle", "area", "riverside"), ("The Eagle", "familyFriendly", "yes"), ("The Eagle", "near", "Burger King")],
        &[("Stadio Olimpico", "capacity", "70634")],
        &[("Adisham Hall", "architect", "Alfred Giles")],
        &[("Italy", "capital", "Rome"), ("Italy", "leaderName", "Sergio Mattarella")],
        &[("Elliot See", "occupation", "Test pilot")],
        &[("Ajoblanco", "region", "Andalusia"), ("Ajoblanco", "ingredient", "Bread"), ("Andalusia", "leader", "Susana Díaz")],
    ];
    rows.iter()
        .enumerate()
        .map(|(i, triples)| {
            let triples = triples
                .iter()
                .map(|(s, p, o)| Triple::new(*s, *p, *o).unwrap())
                .collect();
            DataInstance::new(format!("lin-{i:02}"), triples, vec![], None, Split::Test).unwrap()
        })
        .collect()
}

/// Random subject/object strings and carrier sentences for template
/// round-trips. Returns (subject, predicate, object, sentence).
pub fn random_roundtrip_case(rng: &mut ChaCha8Rng) -> (String, String, String, String) {
    const SUBJECTS: [&str; 8] = ["Alan Bean", "Aarhus Airport", "A.S. Roma", "Mars Hill College", "Ajoblanco", "Elliot See", "The Vaults", "Stadio Olimpico"];
    const OBJECTS: [&str; 8] = ["Wheeler, Texas", "1973", "United States", "Café Adriatic", "2776.0", "NASA", "Osman I", "On NYS 52 1 Mi. Youngsville"];
    const PREDICATES: [&str; 6] = ["birthPlace", "cityServed", "operator", "JOINED", "ground", "near"];
    const CARRIERS: [&str; 8] = [
        "{s} was born in {o}.",
        "The home of {s} is {o}.",
        "{o} is where {s} is found.",
        "According to records, {s} is linked to {o}!",
        "{s} ({o}) is listed.",
        "In {o}, {s} was founded.",
        "{s}: {o}.",
        "Records show that {s} operates near {o}?",
    ];
    let s = SUBJECTS.choose(rng).unwrap();
    let mut o = OBJECTS.choose(rng).unwrap();
    while o == s {
        o = OBJECTS.choose(rng).unwrap();
    }
    let p = PREDICATES.choose(rng).unwrap();
    let carrier = CARRIERS.choose(rng).unwrap();
    let sentence = carrier.replace("{s}", s).replace("{o}", o);
    (s.to_string(), p.to_string(), o.to_string(), sentence)
}
