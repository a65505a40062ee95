use std::collections::BTreeMap;

use glosslab::corpus::{EmbeddingKind, Embeddings, GlossRecord, Language, EMBEDDING_DIM};
use glosslab::revdict::{
    aggregate, batch_gradients, evaluate, prepare_examples, query, tokenize_gloss, train, Aggregation, GlossEncoder,
    RetrievalIndex, RevdictConfig, RevdictExample, RevdictModel, RevdictPreset, RevdictTrainConfig, Scheduler,
    SchedulerKind, VectorPredictor, PRESETS,
};
use glosslab::rng::RngStream;
use glosslab::tensor::Tensor;
use glosslab::tokenizer::{Piece, TokenizerModel, BOS, EOS, PAD};
use glosslab::{Error, Result};

use EmbeddingKind::{Char, Electra, Sgns};

fn tiny_config(vocab: usize) -> RevdictConfig {
    RevdictConfig { d_model: 32, ff_dim: 64, ..RevdictConfig::new(vocab, Sgns) }
}

fn letters_tokenizer() -> TokenizerModel {
    let mut pieces: Vec<Piece> = ('a'..='z').map(|c| Piece { text: c.to_string(), logprob: -3.0 }).collect();
    pieces.push(Piece { text: "▁".into(), logprob: -3.0 });
    for w in ["▁a", "▁the", "fool", "cut", "▁to"] {
        pieces.push(Piece { text: w.into(), logprob: -2.0 });
    }
    TokenizerModel::from_pieces(pieces, 1.0).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn record(id: &str, gloss: &str, sgns: Vec<f32>) -> GlossRecord {
    GlossRecord {
        id: id.into(),
        word: None,
        gloss: gloss.into(),
        embeddings: Embeddings { sgns: Some(sgns), ..Embeddings::default() },
        language: Language::En,
    }
}

fn unit(i: usize) -> Vec<f32> {
    let mut v = vec![0.0; EMBEDDING_DIM];
    v[i] = 1.0;
    v
}

#[test]
fn aggregation_on_identity_encoder() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 5.0], vec![3.0, 4.0, 7.0], vec![9.0, 9.0, 9.0]]).unwrap();
    // One sequence of length 2 padded to 3.
    let avg = aggregate(&x, &[2], Aggregation::Average).unwrap();
    assert_eq!(avg.data(), &[2.0, 3.0, 6.0]);
    assert_eq!(aggregate(&x, &[2], Aggregation::Sum).unwrap().data(), &[4.0, 6.0, 12.0]);
    assert_eq!(aggregate(&x, &[2], Aggregation::Eos).unwrap().data(), &[3.0, 4.0, 7.0]);
    for agg in [Aggregation::Sum, Aggregation::Average, Aggregation::Eos] {
        assert_eq!(aggregate(&x, &[1], agg).unwrap().data(), &[1.0, 2.0, 5.0]);
    }
    assert!(aggregate(&x, &[0], Aggregation::Sum).is_err());
}

#[test]
fn padding_never_changes_encoding() {
    for agg in [Aggregation::Sum, Aggregation::Average, Aggregation::Eos] {
        let mut rng = RngStream::new(1, 0);
        let cfg = RevdictConfig { aggregation: agg, ..tiny_config(40) };
        let model = RevdictModel::new(cfg, &mut rng).unwrap();
        let seq = vec![BOS, 7, 9, 12, 30, EOS];
        let base = model.encode_gloss(&seq).unwrap();
        let mut padded = seq.clone();
        padded.extend([PAD; 5]);
        assert!(max_abs_diff(&base, &model.encode_gloss(&padded).unwrap()) < 1e-6);
        let long: Vec<usize> = std::iter::once(BOS).chain(4..30).chain(std::iter::once(EOS)).collect();
        let both = model.encode_batch(&[&seq, &long]).unwrap();
        assert!(max_abs_diff(&base, both.row(0)) < 1e-6, "{agg:?}");
    }
}

#[test]
fn empty_sequence_is_an_error() {
    let model = RevdictModel::new(tiny_config(40), &mut RngStream::new(1, 0)).unwrap();
    assert!(matches!(model.encode_gloss(&[]), Err(Error::Empty(_))));
    assert!(matches!(model.encode_gloss(&[PAD, PAD]), Err(Error::Empty(_))));
}

#[test]
fn positions_break_permutation_invariance() {
    let seq = vec![BOS, 5, 6, 7, 8, EOS];
    let perm = vec![BOS, 8, 6, 5, 7, EOS];
    for agg in [Aggregation::Sum, Aggregation::Average] {
        let off = RevdictConfig { positional: false, aggregation: agg, ..tiny_config(20) };
        let m = RevdictModel::new(off, &mut RngStream::new(2, 0)).unwrap();
        assert!(max_abs_diff(&m.encode_gloss(&seq).unwrap(), &m.encode_gloss(&perm).unwrap()) < 1e-5);
        let on = RevdictConfig { aggregation: agg, ..tiny_config(20) };
        let m = RevdictModel::new(on, &mut RngStream::new(2, 0)).unwrap();
        assert!(max_abs_diff(&m.encode_gloss(&seq).unwrap(), &m.encode_gloss(&perm).unwrap()) > 1e-3);
    }
}

#[test]
fn predictions_are_deterministic_lowercased_and_finite() {
    let tok = letters_tokenizer();
    let model = RevdictModel::new(tiny_config(tok.vocab_size()), &mut RngStream::new(3, 0)).unwrap();
    let enc = GlossEncoder { model: &model, tokenizer: &tok };
    let a = enc.predict("A Fool").unwrap();
    assert_eq!(a, enc.predict("A Fool").unwrap());
    assert_eq!(a, enc.predict("a fool").unwrap());
    let v = &a[&Sgns];
    assert_eq!(v.len(), EMBEDDING_DIM);
    assert!(v.iter().all(|x| x.is_finite()));
}

#[test]
fn long_glosses_are_truncated_with_markers() {
    let tok = letters_tokenizer();
    let long = "abcdefghij".repeat(40);
    let ids = tokenize_gloss(&tok, &long, 255);
    assert_eq!(ids.len(), 257);
    assert_eq!((ids[0], ids[256]), (BOS, EOS));
}

#[test]
fn preset_table() {
    let bs: Vec<usize> = PRESETS.iter().map(|p| p.batch_size).collect();
    assert_eq!(bs, [1024, 2048, 4096, 8192, 2048, 2048]);
    let me: Vec<usize> = PRESETS.iter().map(|p| p.max_epochs).collect();
    assert_eq!(me, [20, 20, 20, 20, 150, 150]);
    let hp: Vec<usize> = PRESETS.iter().map(|p| p.search_points).collect();
    assert_eq!(hp, [30, 30, 30, 30, 10, 10]);
    let s: Vec<SchedulerKind> = PRESETS.iter().map(|p| p.scheduler).collect();
    use SchedulerKind::*;
    assert_eq!(s, [Cosine, Cosine, Cosine, Cosine, Plateau, Plateau]);
    let mt: Vec<bool> = PRESETS.iter().map(|p| p.multitask).collect();
    assert_eq!(mt, [false, false, false, false, false, true]);

    let v6 = RevdictPreset::by_name("V6").unwrap();
    let c = v6.model_config(100, Language::En, Char);
    assert_eq!((c.targets.len(), c.primary), (3, Char));
    assert_eq!(v6.model_config(100, Language::It, Sgns).targets, vec![Sgns, Char]);
    let c1 = RevdictPreset::by_name("v1").unwrap().model_config(100, Language::En, Sgns);
    assert_eq!((c1.layers, c1.heads, c1.d_model, c1.ff_dim, c1.targets.len()), (2, 2, 256, 1024, 1));
    assert!(matches!(v6.train_config().scheduler, Scheduler::Plateau { .. }));
    assert!(RevdictPreset::by_name("v7").is_err());
}

/// Glosses built from a few words; the target is a fixed function of the
/// words used.
fn toy_data(n: usize, rng: &mut RngStream, tok: &TokenizerModel) -> Vec<RevdictExample> {
    let words = ["fool", "cut", "the", "a", "to", "bad", "good", "cat"];
    let basis: Vec<Vec<f32>> =
        words.iter().map(|_| (0..EMBEDDING_DIM).map(|_| rng.normal() as f32 * 0.3).collect()).collect();
    (0..n)
        .map(|i| {
            let k = 2 + rng.below(3);
            let picks: Vec<usize> = (0..k).map(|_| rng.below(words.len())).collect();
            let gloss: Vec<&str> = picks.iter().map(|&p| words[p]).collect();
            let mut target = vec![0.0f32; EMBEDDING_DIM];
            for &p in &picks {
                for (t, b) in target.iter_mut().zip(&basis[p]) {
                    *t += b / k as f32;
                }
            }
            let r = record(&format!("toy.{i}"), &gloss.join(" "), target);
            prepare_examples(&[r], tok, &[Sgns], 255).unwrap().pop().unwrap()
        })
        .collect()
}

#[test]
fn toy_training_improves_dev_and_is_reproducible() {
    let tok = letters_tokenizer();
    let mut rng = RngStream::new(4, 0);
    let data = toy_data(240, &mut rng, &tok);
    let (tr, dev) = data.split_at(200);
    let cfg = RevdictTrainConfig { batch_size: 32, max_epochs: 20, ..RevdictTrainConfig::default() };
    let run = || {
        let mut m = RevdictModel::new(tiny_config(tok.vocab_size()), &mut RngStream::new(5, 0)).unwrap();
        let rep = train(&mut m, tr, dev, &cfg).unwrap();
        (m, rep)
    };
    let (m1, r1) = run();
    let first = r1.epochs[0].dev.unwrap().mse;
    let best = r1.epochs.iter().filter_map(|e| e.dev).map(|d| d.mse).fold(f64::INFINITY, f64::min);
    assert!(best < first, "{best} vs {first}");
    assert_eq!(evaluate(&m1, dev, 16).unwrap().mse, best);
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1.params().to_bytes(), m2.params().to_bytes());
}

#[test]
fn overfits_a_small_set() {
    let tok = letters_tokenizer();
    let mut rng = RngStream::new(6, 0);
    let data = toy_data(32, &mut rng, &tok);
    let mut m = RevdictModel::new(RevdictConfig { dropout: 0.0, ..tiny_config(tok.vocab_size()) }, &mut rng).unwrap();
    let cfg = RevdictTrainConfig {
        batch_size: 32,
        max_epochs: 500,
        scheduler: Scheduler::Constant,
        weight_decay: 0.0,
        ..RevdictTrainConfig::default()
    };
    train(&mut m, &data, &[], &cfg).unwrap();
    let mse = evaluate(&m, &data, 32).unwrap().mse;
    assert!(mse < 0.01, "train mse {mse}");
}

#[test]
fn both_heads_reach_the_encoder() {
    let tok = letters_tokenizer();
    let mut rng = RngStream::new(7, 0);
    let cfg = RevdictConfig { targets: vec![Sgns, Electra], ..tiny_config(tok.vocab_size()) };
    let model = RevdictModel::new(cfg, &mut rng).unwrap();
    let recs: Vec<GlossRecord> = (0..8)
        .map(|i| {
            let mut r = record(&format!("r{i}"), "to cut a fool", (0..256).map(|_| rng.normal() as f32).collect());
            r.embeddings.electra = Some((0..256).map(|_| rng.normal() as f32).collect());
            r
        })
        .collect();
    let ex = prepare_examples(&recs, &tok, &[Sgns, Electra], 255).unwrap();
    let batch: Vec<&RevdictExample> = ex.iter().collect();
    let wq = model.params().id("layer0.wq").unwrap();
    let head_b = model.params().id("head.electra.w").unwrap();
    for (only, other) in [(Sgns, Electra), (Electra, Sgns)] {
        let w: BTreeMap<_, _> = [(only, 1.0)].into();
        let (_, g) = batch_gradients(&model, &batch, &w, 1).unwrap();
        let enc: f32 = g.param(wq).unwrap().iter().map(|x| x.abs()).sum();
        assert!(enc > 0.0, "{only} head sends no gradient to the encoder");
        if other == Electra {
            assert!(g.param(head_b).is_none_or(|h| h.iter().all(|&x| x == 0.0)));
        }
    }
}

#[test]
fn missing_target_names_record() {
    let tok = letters_tokenizer();
    let r = record("en.dev.3", "a fool", unit(0));
    let err = prepare_examples(&[r], &tok, &[Sgns, Char], 255).unwrap_err();
    assert!(err.to_string().contains("en.dev.3"));
}

#[test]
fn checkpoint_round_trip() {
    let tok = letters_tokenizer();
    let mut m = RevdictModel::new(tiny_config(tok.vocab_size()), &mut RngStream::new(8, 0)).unwrap();
    m.set_vocab_fingerprint(tok.fingerprint());
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let l = RevdictModel::load(dir.path(), Some(&tok)).unwrap();
    assert_eq!(l.config(), m.config());
    let seq = tokenize_gloss(&tok, "to cut", 255);
    assert_eq!(l.encode_gloss(&seq).unwrap(), m.encode_gloss(&seq).unwrap());
}

#[test]
fn index_rows_are_unit_and_validated() {
    let one = RetrievalIndex::build(&[record("a", "x", vec![3.0; 256])], Sgns).unwrap();
    let n: f32 = one.row(0).iter().map(|x| x * x).sum::<f32>().sqrt();
    assert!((n - 1.0).abs() < 1e-6);
    let err = RetrievalIndex::build(&[record("zero.1", "x", vec![0.0; 256])], Sgns).unwrap_err();
    assert!(err.to_string().contains("zero.1"));
    let dup = [record("d", "x", unit(0)), record("d", "y", unit(1))];
    assert!(RetrievalIndex::build(&dup, Sgns).is_err());
}

struct Stub(Vec<f32>);

impl VectorPredictor for Stub {
    fn predict_vector(&self, _gloss: &str) -> Result<Vec<f32>> {
        Ok(self.0.clone())
    }
}

#[test]
fn query_ordering() {
    let recs = [record("c", "third", unit(2)), record("a", "first", unit(0)), record("b", "second", unit(1))];
    let idx = RetrievalIndex::build(&recs, Sgns).unwrap();
    let hits = query(&Stub(unit(1)), &idx, "anything", 2).unwrap();
    assert_eq!(hits[0].id, "b");
    assert!((hits[0].cosine - 1.0).abs() < 1e-9);
    assert_eq!(hits.len(), 2);
    let all = query(&Stub(unit(1)), &idx, "anything", 10).unwrap();
    assert_eq!(all.len(), 3);
    let ortho = query(&Stub(unit(9)), &idx, "anything", 3).unwrap();
    let ids: Vec<&str> = ortho.iter().map(|h| h.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert!(ortho.iter().all(|h| h.cosine == 0.0));
    assert!(query(&Stub(unit(1)), &idx, "x", 0).is_err());
}
