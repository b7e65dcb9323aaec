mod common;

use common::{fixture, matches_oracle, multi_bleu, random_parent_case, rng, ParentCase};
use d2t_core::metrics::{corpus_bleu, parent_instance, parent_scores, tokenize, EvalExample};
use d2t_core::{DataInstance, Split, Triple};
use proptest::prelude::*;
use rand::Rng;

fn read_lines(name: &str) -> Vec<String> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn ours(hyps: &[&str], refs: &[Vec<&str>]) -> f64 {
    let h: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s)).collect();
    let r: Vec<Vec<Vec<String>>> = refs
        .iter()
        .map(|rs| rs.iter().map(|s| tokenize(s)).collect())
        .collect();
    corpus_bleu(&h, &r, 4).unwrap().score
}

#[test]
fn worked_bleu_pair() {
    let score = ours(&["the cat sat on mat"], &[vec!["the cat sat on the mat"]]);
    // 100 * exp(1 - 6/5) * (1 * 3/4 * 2/3 * 1/2)^(1/4)
    let hand = 100.0 * (1.0f64 - 6.0 / 5.0).exp() * (0.75f64 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((score - hand).abs() < 1e-9);
    assert!((score - 57.89).abs() < 0.01, "{score}");
    assert!((multi_bleu(&["the cat sat on mat"], &[vec!["the cat sat on the mat"]]) - score).abs() < 1e-9);
}

#[test]
fn fixture_corpus_matches_multi_bleu() {
    let hyps = read_lines("bleu_corpus/hyp.txt");
    let r0 = read_lines("bleu_corpus/ref0");
    let r1 = read_lines("bleu_corpus/ref1");
    assert_eq!(hyps.len(), 100);
    let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
    let refs: Vec<Vec<&str>> = r0.iter().zip(&r1).map(|(a, b)| vec![a.as_str(), b.as_str()]).collect();

    let score = ours(&h, &refs);
    let port = multi_bleu(&h, &refs);
    assert!((score - port).abs() < 1e-9, "{score} vs port {port}");

    let recorded = std::fs::read_to_string(fixture("bleu_corpus/multi_bleu_output.txt")).unwrap();
    let recorded = common::parse_multi_bleu_line(&recorded).unwrap();
    assert!((score - recorded).abs() < 0.1, "{score} vs recorded {recorded}");

    if let Some(live) = common::perl_multi_bleu(&fixture("bleu_corpus/hyp.txt"), &fixture("bleu_corpus/ref")) {
        assert!((score - live).abs() < 0.1, "{score} vs perl {live}");
    }
}

#[test]
fn identity_corpus_is_exactly_100() {
    let r0 = read_lines("bleu_corpus/ref0");
    let h: Vec<&str> = r0.iter().map(String::as_str).collect();
    let refs: Vec<Vec<&str>> = h.iter().map(|s| vec![*s]).collect();
    assert_eq!(ours(&h, &refs), 100.0);
}

#[test]
fn all_empty_hypotheses_score_zero() {
    assert_eq!(ours(&["", ""], &[vec!["a b c d"], vec!["e f g h"]]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn bleu_agrees_with_port_on_random_corpora(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let vocab = ["a", "b", "c", "d", "e"];
        let sentence = |rng: &mut rand_chacha::ChaCha8Rng| {
            let len = rng.random_range(1..12);
            (0..len).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(" ")
        };
        let n = rng.random_range(1..20);
        let hyps: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<String>> = (0..n)
            .map(|_| {
                let k = rng.random_range(1..4);
                (0..k).map(|_| sentence(&mut rng)).collect()
            })
            .collect();
        let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
        let r: Vec<Vec<&str>> = refs.iter().map(|v| v.iter().map(String::as_str).collect()).collect();
        let port = multi_bleu(&h, &r);
        let score = ours(&h, &r);
        prop_assert!((score - port).abs() < 1e-6, "{} vs {}", score, port);
    }
}

fn to_example(case: &ParentCase) -> EvalExample {
    EvalExample {
        hypothesis: case.hypothesis.clone(),
        references: case.references.clone(),
        table_values: case.table_values.clone(),
        table_entries: case.table_entries.clone(),
    }
}

#[test]
fn parent_matches_brute_force_on_random_cases() {
    let mut rng = rng(0x5eed);
    let cases: Vec<ParentCase> = (0..200).map(|_| random_parent_case(&mut rng)).collect();
    let examples: Vec<EvalExample> = cases.iter().map(to_example).collect();
    for lambda in [0.0, 0.5, 1.0] {
        let corpus = parent_scores(&examples, lambda).unwrap();
        for (case, got) in cases.iter().zip(&corpus.per_instance) {
            assert!(case.hypothesis.len() <= 6);
            matches_oracle(case, lambda, (got.precision, got.recall, got.f1), 1e-9).unwrap();
        }
    }
}

#[test]
fn parent_boundaries() {
    let inst = DataInstance::new(
        "x",
        vec![Triple::new("cat", "sat", "mat").unwrap()],
        vec!["cat sat mat".into()],
        None,
        Split::Test,
    )
    .unwrap();
    // Every reference token is in the table, and the hypothesis is the reference.
    let identity = parent_instance(&EvalExample::from_instance("cat sat mat", &inst), 0.5).unwrap();
    assert_eq!((identity.precision, identity.recall, identity.f1), (1.0, 1.0, 1.0));

    let empty = parent_instance(&EvalExample::from_instance("", &inst), 0.5).unwrap();
    assert_eq!(empty.f1, 0.0);

    let disjoint = parent_instance(&EvalExample::from_instance("dog ran", &inst), 0.5).unwrap();
    assert_eq!(disjoint.f1, 0.0);
}
