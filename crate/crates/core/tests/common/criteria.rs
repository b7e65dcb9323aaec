//! One check per acceptance criterion. Each returns a short detail line on
//! success and the reason on failure.

use std::time::{Duration, Instant};

use d2t_core::backend::{RecordingBackend, TableEchoBackend};
use d2t_core::corpus::{
    self, build_unseen_predicate_split, parse_dart, parse_e2e, parse_webnlg, predicate_set,
    read_canonical, write_canonical, ParseOptions,
};
use d2t_core::disambiguation::{
    apply_template, build_prompt, ensure_templates, mine_template, PromptSpec, TemplateStore,
    DEFAULT_PROMPT_PREFIX,
};
use d2t_core::fusion::{linearize_baseline, FUSION_PREFIX};
use d2t_core::harness::{run_pipeline, sha256_hex, verbalize, RunConfig};
use d2t_core::metrics::{corpus_bleu, parent_instance, parent_scores, tokenize, EvalExample};
use d2t_core::{DataInstance, Split, Triple};

use super::{fixture, matches_oracle, multi_bleu, random_parent_case, random_roundtrip_case, rng};

pub type Outcome = Result<String, String>;

/// Digest of the checked-in prompt prefix fixture, frozen when it was added.
pub const PROMPT_PREFIX_SHA256: &str = "386523c4d4b80b83b3c8958378cd2409172692df60a339e94116e909531337f4";

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(started: Instant, limit: Duration) -> Result<Duration, String> {
    let elapsed = started.elapsed();
    ensure!(elapsed < limit, "took {elapsed:?}, limit {limit:?}");
    Ok(elapsed)
}

pub fn prompt_fidelity() -> Outcome {
    let started = Instant::now();
    let golden = std::fs::read(fixture("prompt_prefix.txt")).map_err(|e| e.to_string())?;
    ensure!(sha256_hex(&golden) == PROMPT_PREFIX_SHA256, "fixture digest changed");
    ensure!(DEFAULT_PROMPT_PREFIX.as_bytes() == golden.as_slice(), "default prefix differs from fixture");
    let spec = PromptSpec::default();
    ensure!(spec.prefix.as_bytes() == golden.as_slice(), "PromptSpec::default prefix differs");
    ensure!(spec.stop_sequence == "\n" && spec.max_new_tokens == 256 && spec.temperature == 0.0, "completion settings differ");

    let apollo = Triple::new("Apollo 11", "operator", "NASA").unwrap();
    let prompt = build_prompt(&apollo, &spec).map_err(|e| e.to_string())?;
    let expected = format!("{}\n\nTable: Apollo 11 | operator | NASA\nText:", String::from_utf8_lossy(&golden));
    ensure!(prompt == expected, "prompt {prompt:?}");
    let michael = Triple::new("Michael", "birth Place", "USA").unwrap();
    let bare = build_prompt(&michael, &spec.clone().with_prefix("")).map_err(|e| e.to_string())?;
    ensure!(bare == "Table: Michael | birth Place | USA\nText:", "empty-prefix prompt {bare:?}");
    let elapsed = within(started, Duration::from_secs(1))?;
    Ok(format!("{} bytes, sha256 {}..., {elapsed:?}", golden.len(), &PROMPT_PREFIX_SHA256[..12]))
}

pub fn query_economy() -> Outcome {
    let started = Instant::now();
    let corpus = super::synthetic_corpus(1000, 37, 99);
    ensure!(corpus.len() == 1000, "corpus size {}", corpus.len());
    let predicates = predicate_set(&corpus).len();
    ensure!(predicates == 37, "corpus has {predicates} predicates");
    let backend = RecordingBackend::new(TableEchoBackend);
    let mut store = TemplateStore::new();
    let spec = PromptSpec::default();
    let first = ensure_templates(&corpus, &mut store, Some(&backend), &spec, 4);
    ensure!(backend.calls() == 37, "first pass made {} calls", backend.calls());
    ensure!(first.backend_calls == 37 && first.missing.len() == 37, "report {first:?}");
    ensure!(store.len() == 37, "store holds {}", store.len());
    ensure!(backend.peak_in_flight() <= 4, "peak concurrency {}", backend.peak_in_flight());
    backend.reset();
    let second = ensure_templates(&corpus, &mut store, Some(&backend), &spec, 4);
    ensure!(backend.calls() == 0 && second.backend_calls == 0, "rerun made {} calls", backend.calls());
    let elapsed = within(started, Duration::from_secs(5))?;
    Ok(format!("1000 instances, 37 predicates: 37 calls then 0, {elapsed:?}"))
}

pub fn template_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = rng(500);
    let mut passed = 0;
    for _ in 0..500 {
        let (s, p, o, sentence) = random_roundtrip_case(&mut rng);
        let triple = Triple::new(s, p, o).unwrap();
        let template = mine_template(&triple, &sentence).map_err(|e| format!("{sentence:?}: {}", e.reason))?;
        let back = apply_template(&template, &triple).map_err(|e| e.to_string())?;
        ensure!(back == sentence, "{sentence:?} came back as {back:?} via {:?}", template.pattern());
        passed += 1;
    }
    let elapsed = within(started, Duration::from_secs(5))?;
    Ok(format!("{passed}/500 byte-exact, {elapsed:?}"))
}

fn fixture_corpus() -> Vec<DataInstance> {
    corpus::load_canonical(&fixture("e2e_run/corpus.jsonl")).unwrap()
}

pub fn fusion_input_format() -> Outcome {
    let started = Instant::now();
    let shape = regex::Regex::new(r"^summarize: \S(.*\S)?$").unwrap();
    let mut instances = fixture_corpus();
    let webnlg = std::fs::read(fixture("webnlg_sample.xml")).unwrap();
    instances.extend(parse_webnlg(&webnlg, &ParseOptions::new(Split::Test)).unwrap().instances);
    let mut store = TemplateStore::new();
    ensure_templates(&instances, &mut store, Some(&TableEchoBackend), &PromptSpec::default(), 2);
    let records = verbalize(&instances, &store).map_err(|e| e.to_string())?;
    for record in &records {
        let texts: Vec<&str> = record.sentences.iter().map(|s| s.text.as_str()).collect();
        ensure!(shape.is_match(&record.input), "{}: {:?}", record.id, record.input);
        ensure!(record.input == format!("{FUSION_PREFIX}{}", texts.join(" ")), "{}: join differs", record.id);
        let expected_len = FUSION_PREFIX.len() + texts.iter().map(|t| t.len()).sum::<usize>() + texts.len() - 1;
        ensure!(record.input.len() == expected_len, "{}: length {} != {expected_len}", record.id, record.input.len());
    }
    let elapsed = within(started, Duration::from_secs(5))?;
    Ok(format!("{} instances, {elapsed:?}", records.len()))
}

pub fn baseline_linearization() -> Outcome {
    let golden = std::fs::read_to_string(fixture("linearization_golden.txt")).map_err(|e| e.to_string())?;
    let golden: Vec<&str> = golden.lines().collect();
    let instances = super::linearization_instances();
    ensure!(golden.len() == 20 && instances.len() == 20, "expected 20 goldens");
    for (inst, want) in instances.iter().zip(&golden) {
        let got = linearize_baseline(inst);
        ensure!(got == *want, "{}: {got:?} != {want:?}", inst.id());
    }
    Ok("20/20 exact".into())
}

fn lines(name: &str) -> Vec<String> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn score(hyps: &[&str], refs: &[Vec<&str>]) -> f64 {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s)).collect();
    let r: Vec<Vec<Vec<String>>> = refs.iter().map(|rs| rs.iter().map(|s| tokenize(s)).collect()).collect();
    corpus_bleu(&h, &r, 4).unwrap().score
}

pub fn bleu_oracle() -> Outcome {
    let worked = score(&["the cat sat on mat"], &[vec!["the cat sat on the mat"]]);
    ensure!((worked - 57.89).abs() <= 0.01, "worked pair scored {worked}");

    let hyps = lines("bleu_corpus/hyp.txt");
    let (r0, r1) = (lines("bleu_corpus/ref0"), lines("bleu_corpus/ref1"));
    ensure!(hyps.len() == 100, "fixture has {} sentences", hyps.len());
    let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let refs: Vec<Vec<&str>> = r0.iter().zip(&r1).map(|(a, b)| vec![a.as_str(), b.as_str()]).collect();
    let ours = score(&h, &refs);
    let port = multi_bleu(&h, &refs);
    ensure!((ours - port).abs() < 0.1, "{ours} vs ported multi-bleu {port}");
    let recorded = std::fs::read_to_string(fixture("bleu_corpus/multi_bleu_output.txt")).unwrap();
    let recorded = super::parse_multi_bleu_line(&recorded).ok_or("unreadable recorded score")?;
    ensure!((ours - recorded).abs() < 0.1, "{ours} vs recorded multi-bleu {recorded}");
    let live = super::perl_multi_bleu(&fixture("bleu_corpus/hyp.txt"), &fixture("bleu_corpus/ref"));
    if let Some(live) = live {
        ensure!((ours - live).abs() < 0.1, "{ours} vs perl multi-bleu {live}");
    }

    let refs_only: Vec<&str> = r0.iter().map(String::as_str).collect();
    let identity = score(&refs_only, &refs_only.iter().map(|r| vec![*r]).collect::<Vec<_>>());
    ensure!(identity == 100.0, "identity scored {identity}");
    Ok(format!(
        "worked pair {worked:.4}, fixture {ours:.4} vs multi-bleu {recorded:.2}{}, identity {identity:.1}",
        live.map_or(String::new(), |l| format!(" (live perl {l:.2})"))
    ))
}

pub fn parent_oracle() -> Outcome {
    let mut rng = rng(0xba5e);
    let cases: Vec<_> = (0..200).map(|_| random_parent_case(&mut rng)).collect();
    let examples: Vec<EvalExample> = cases
        .iter()
        .map(|c| EvalExample {
            hypothesis: c.hypothesis.clone(),
            references: c.references.clone(),
            table_values: c.table_values.clone(),
            table_entries: c.table_entries.clone(),
        })
        .collect();
    let mut checked = 0;
    for lambda in [0.5, 0.0, 1.0, 0.25] {
        let corpus = parent_scores(&examples, lambda).map_err(|e| e.to_string())?;
        for (case, got) in cases.iter().zip(&corpus.per_instance) {
            if case.hypothesis.len() <= 6 {
                matches_oracle(case, lambda, (got.precision, got.recall, got.f1), 1e-9)?;
                checked += 1;
            }
        }
    }
    let inst = DataInstance::new(
        "oracle",
        vec![Triple::new("cat", "sat", "mat").unwrap()],
        vec!["cat sat mat".into()],
        None,
        Split::Test,
    )
    .unwrap();
    let identity = parent_instance(&EvalExample::from_instance("cat sat mat", &inst), 0.5).map_err(|e| e.to_string())?;
    ensure!(identity.f1 == 1.0, "fully entailed identity F1 {}", identity.f1);
    let empty = parent_instance(&EvalExample::from_instance("", &inst), 0.5).map_err(|e| e.to_string())?;
    ensure!(empty.f1 == 0.0, "empty hypothesis F1 {}", empty.f1);
    Ok(format!("{checked} instance scores within 1e-9, boundaries exact"))
}

/// Runs on the full DART release when `D2T_DART_DIR` points at it, otherwise
/// on the checked-in DART-format fixture.
pub fn unseen_split_soundness() -> Outcome {
    let (dir, source) = match std::env::var_os("D2T_DART_DIR") {
        Some(d) => (std::path::PathBuf::from(d), "DART release"),
        None => (fixture(""), "DART-format fixture"),
    };
    let names: [&str; 3] = if source == "DART release" {
        ["dart-v1.1.1-full-train.json", "dart-v1.1.1-full-dev.json", "dart-v1.1.1-full-test.json"]
    } else {
        ["dart_train.json", "dart_dev.json", "dart_test.json"]
    };
    let load = |name: &str, split| {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        parse_dart(&bytes, &ParseOptions::new(split).with_error_budget(1.0))
            .map(|o| o.instances)
            .map_err(|e| e.to_string())
    };
    let train = load(names[0], Split::Train)?;
    let dev = load(names[1], Split::Validation)?;
    let test = load(names[2], Split::Test)?;
    let unseen = build_unseen_predicate_split(&train, &dev, &test);
    let seen = predicate_set(train.iter().chain(&dev));
    let unseen_predicates = predicate_set(&unseen);
    let overlap: Vec<&&str> = unseen_predicates.intersection(&seen).collect();
    ensure!(overlap.is_empty(), "unseen split shares predicates {overlap:?}");
    Ok(format!(
        "{source}: {} of {} test instances unseen, predicate overlap empty",
        unseen.len(),
        test.len()
    ))
}

pub fn hermetic_end_to_end() -> Outcome {
    let started = Instant::now();
    let config_path = fixture("e2e_run/config.json");
    let mut outputs = Vec::new();
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    for run in 0..2 {
        let mut config = RunConfig::load(&config_path).map_err(|e| e.to_string())?;
        config.output_dir = scratch.path().join(format!("run{run}"));
        config.template_store = config.output_dir.join("templates.json");
        let manifest = run_pipeline(&config).map_err(|e| e.to_string())?;
        ensure!(manifest.failure.is_none(), "run {run} failed: {:?}", manifest.failure);
        ensure!(manifest.counters.eval_instances == 50, "run {run} saw {} instances", manifest.counters.eval_instances);
        ensure!(manifest.counters.instances_failed == 0, "run {run}: {} failed instances", manifest.counters.instances_failed);
        let hyps = std::fs::read(config.output_dir.join("hypotheses.jsonl")).map_err(|e| e.to_string())?;
        let report = std::fs::read(config.output_dir.join("report.json")).map_err(|e| e.to_string())?;
        outputs.push((hyps, report, manifest));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    ensure!(a.0 == b.0, "hypotheses differ between runs");
    ensure!(a.1 == b.1, "reports differ between runs");
    ensure!(a.2.template_store_hash == b.2.template_store_hash, "template stores differ");
    ensure!(a.2.instances == b.2.instances && a.2.counters == b.2.counters, "manifest records differ");
    let elapsed = within(started, Duration::from_secs(30))?;
    let report: serde_json::Value = serde_json::from_slice(&a.1).unwrap();
    Ok(format!(
        "2 runs x 50 instances byte-identical (BLEU {:.2}, PARENT F1 {:.4}), {elapsed:?}",
        report["bleu"].as_f64().unwrap_or_default(),
        report["parent_f1"].as_f64().unwrap_or_default()
    ))
}

pub fn parser_conformance() -> Outcome {
    let read = |name: &str| std::fs::read(fixture(name)).map_err(|e| format!("{name}: {e}"));
    let counts = |v: &[DataInstance]| {
        (
            v.len(),
            v.iter().map(|i| i.triples().len()).sum::<usize>(),
            v.iter().map(|i| i.references().len()).sum::<usize>(),
        )
    };
    let webnlg = parse_webnlg(&read("webnlg_sample.xml")?, &ParseOptions::new(Split::Train)).map_err(|e| e.to_string())?;
    ensure!(counts(&webnlg.instances) == (5, 9, 11), "webnlg {:?}", counts(&webnlg.instances));
    let dart = parse_dart(&read("dart_test.json")?, &ParseOptions::new(Split::Test)).map_err(|e| e.to_string())?;
    ensure!(counts(&dart.instances) == (6, 8, 7), "dart {:?}", counts(&dart.instances));
    let e2e = parse_e2e(&read("e2e_sample.csv")?, &ParseOptions::new(Split::Test)).map_err(|e| e.to_string())?;
    ensure!(counts(&e2e.instances) == (3, 15, 6), "e2e {:?}", counts(&e2e.instances));

    let mut all = webnlg.instances;
    all.extend(dart.instances);
    all.extend(e2e.instances);
    all.extend(fixture_corpus());
    let bytes = write_canonical(&all);
    let back = read_canonical(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == all, "canonical round trip changed instances");
    ensure!(write_canonical(&back) == bytes, "canonical round trip changed bytes");
    Ok(format!("webnlg 5/9/11, dart 6/8/7, e2e 3/15/6; {} instances round-trip", all.len()))
}
