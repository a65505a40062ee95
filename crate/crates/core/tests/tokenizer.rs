use std::collections::BTreeMap;

use glosslab::rng::RngStream;
use glosslab::tokenizer::{train, Piece, TokenizerModel, TrainerConfig, NUM_SPECIALS, UNK};
use proptest::prelude::*;

fn config(vocab_size: usize) -> TrainerConfig {
    TrainerConfig { vocab_size, ..TrainerConfig::default() }
}

/// All segmentations of `s` into pieces from `vocab`.
fn segmentations<'a>(s: &'a str, vocab: &[&'a str]) -> Vec<Vec<&'a str>> {
    if s.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for &p in vocab {
        if let Some(rest) = s.strip_prefix(p) {
            for mut tail in segmentations(rest, vocab) {
                tail.insert(0, p);
                out.push(tail);
            }
        }
    }
    out
}

/// EM by explicit enumeration of every segmentation.
fn brute_force_em(words: &[(&str, f64)], init: &BTreeMap<&str, f64>, iters: usize) -> BTreeMap<String, f64> {
    let vocab: Vec<&str> = init.keys().copied().collect();
    let mut p: BTreeMap<String, f64> = init.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for _ in 0..iters {
        let mut counts: BTreeMap<String, f64> = vocab.iter().map(|v| (v.to_string(), 0.0)).collect();
        for &(w, c) in words {
            let segs = segmentations(w, &vocab);
            let probs: Vec<f64> = segs.iter().map(|s| s.iter().map(|t| p[*t]).product()).collect();
            let z: f64 = probs.iter().sum();
            for (seg, pr) in segs.iter().zip(&probs) {
                for t in seg {
                    *counts.get_mut(*t).unwrap() += c * pr / z;
                }
            }
        }
        let total: f64 = counts.values().sum();
        p = counts.into_iter().map(|(k, v)| (k, v / total)).collect();
    }
    p
}

fn prob(m: &TokenizerModel, piece: &str) -> f64 {
    m.logprob(m.piece_id(piece).unwrap()).exp()
}

#[test]
fn abab_prefers_joint_piece() {
    let (m, report) = train(&["abab", "abab"], &config(8)).unwrap();
    let mut texts: Vec<&str> = m.pieces().iter().map(|p| p.text.as_str()).collect();
    texts.sort();
    assert_eq!(texts, vec!["a", "ab", "b"]);
    // Seed scores: chars by weighted frequency (4 each), "ab" by two
    // occurrences times length two.
    let init: BTreeMap<&str, f64> = [("a", 1.0 / 3.0), ("b", 1.0 / 3.0), ("ab", 1.0 / 3.0)].into_iter().collect();
    let iters: usize = report.rounds.iter().map(Vec::len).sum();
    let oracle = brute_force_em(&[("abab", 2.0)], &init, iters);
    for (piece, p) in &oracle {
        assert!((prob(&m, piece) - p).abs() < 1e-9, "{piece}: {} vs {p}", prob(&m, piece));
    }
    assert!(prob(&m, "ab") > prob(&m, "a") && prob(&m, "ab") > prob(&m, "b"));
}

#[test]
fn single_symbol_corpus() {
    let (m, _) = train(&["a", "a", "a"], &config(8)).unwrap();
    assert_eq!(m.vocab_size(), NUM_SPECIALS + 1);
    assert_eq!(m.pieces()[0], Piece { text: "a".into(), logprob: 0.0 });
}

#[test]
fn vocab_smaller_than_alphabet_is_config_error() {
    let err = train(&["abcdef"], &config(6)).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn unseen_character_is_unk() {
    let (m, _) = train(&["a fool", "an idiot"], &config(40)).unwrap();
    assert_eq!(m.encode("z"), vec![UNK]);
    assert_eq!(m.decode(&m.encode("a fool")), "a fool");
}

#[test]
fn viterbi_matches_exhaustive_enumeration() {
    let mut rng = RngStream::new(42, 0);
    for case in 0..200 {
        let raw: Vec<f64> = (0..3).map(|_| rng.uniform() + 0.05).collect();
        let z: f64 = raw.iter().sum();
        let names = ["a", "b", "ab"];
        let pieces =
            names.iter().zip(&raw).map(|(t, r)| Piece { text: t.to_string(), logprob: (r / z).ln() }).collect();
        let m = TokenizerModel::from_pieces(pieces, 1.0).unwrap();
        let s: String = (0..6).map(|_| if rng.below(2) == 0 { 'a' } else { 'b' }).collect();
        let best = segmentations(&s, &names)
            .iter()
            .map(|seg| seg.iter().map(|t| m.logprob(m.piece_id(t).unwrap())).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        let got = m.score(&m.encode(&s));
        assert!((got - best).abs() < 1e-12, "case {case} {s}: {got} vs {best}");
        assert_eq!(m.decode(&m.encode(&s)), s);
    }
}

#[test]
fn ties_prefer_fewer_pieces() {
    let half = 0.5f64.ln();
    let p = |t: &str, lp: f64| Piece { text: t.into(), logprob: lp };
    // "ab" and "a"+"b" score the same; the single piece wins.
    let m = TokenizerModel::from_pieces(vec![p("a", half), p("b", 0.0), p("ab", half)], 1.0).unwrap();
    assert_eq!(m.encode_pieces("ab"), vec!["ab"]);
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-eé]{1,6}( [a-eé]{1,6}){0,4}", 3..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trained_model_invariants(corpus in corpus_strategy(), extra in 0usize..40) {
        let alphabet: std::collections::BTreeSet<char> = corpus.iter().flat_map(|s| s.chars()).map(|c| if c == ' ' { '▁' } else { c }).collect();
        let vocab_size = NUM_SPECIALS + alphabet.len() + extra;
        let (m, report) = train(&corpus, &config(vocab_size)).unwrap();
        prop_assert!(m.vocab_size() <= vocab_size);
        let total: f64 = m.pieces().iter().map(|p| p.logprob.exp()).sum();
        prop_assert!(total <= 1.0 + 1e-6);
        for p in m.pieces() {
            prop_assert!(p.logprob.is_finite() && p.logprob <= 0.0);
        }
        for c in &alphabet {
            prop_assert!(m.piece_id(&c.to_string()).is_some());
        }
        for g in &corpus {
            prop_assert_eq!(&m.decode(&m.encode(g)), g);
        }
        for round in &report.rounds {
            for w in round.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "{:?}", round);
            }
        }
        let ids: Vec<usize> = m.pieces().iter().map(|p| m.piece_id(&p.text).unwrap()).collect();
        prop_assert_eq!(ids, (NUM_SPECIALS..m.vocab_size()).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic(corpus in corpus_strategy()) {
        let (a, _) = train(&corpus, &config(30)).unwrap();
        let (b, _) = train(&corpus, &config(30)).unwrap();
        prop_assert_eq!(a.to_text(), b.to_text());
        prop_assert_eq!(TokenizerModel::from_text(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn sampled_segmentations_decode_back(corpus in corpus_strategy(), seed in any::<u64>()) {
        let (m, _) = train(&corpus, &config(30)).unwrap();
        let mut rng = RngStream::new(seed, 0);
        for g in &corpus {
            prop_assert_eq!(&m.decode(&m.encode_sample(g, 0.5, &mut rng)), g);
        }
    }
}

#[test]
fn em_monotone_over_many_iterations() {
    let corpus: Vec<String> = (0..200)
        .map(|i| {
            let words = ["the", "then", "there", "other", "heather", "rather", "thermal", "her"];
            (0..5).map(|k| words[(i * 7 + k * 3) % words.len()]).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let cfg = TrainerConfig { vocab_size: 18, em_iterations: 12, ..TrainerConfig::default() };
    let (_, report) = train(&corpus, &cfg).unwrap();
    assert!(report.rounds.len() > 1);
    for round in &report.rounds {
        for w in round.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{round:?}");
        }
    }
}
