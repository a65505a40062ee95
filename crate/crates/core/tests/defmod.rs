use glosslab::corpus::{EmbeddingKind, Embeddings, Language, EMBEDDING_DIM};
use glosslab::defmod::{
    beam_search, evaluate_loss, exhaustive_search, generate_with_fallback, greedy_decode, is_deformed, train,
    DefmodConfig, DefmodModel, EarlyStopping, Example, GlossGenerator, RnnKind, SeedContextSpec, State, StepModel,
    TrainConfig, VectorSource,
};
use glosslab::rng::RngStream;
use glosslab::tensor::Tensor;
use glosslab::tokenizer::{Piece, TokenizerModel, BOS, EOS};
use glosslab::{Error, Result};
use proptest::prelude::*;

fn single(kind: EmbeddingKind) -> VectorSource {
    VectorSource::Single { embedding: kind }
}

fn small_config(vocab: usize, hidden: usize, rnn: RnnKind) -> DefmodConfig {
    let mut c = DefmodConfig::new(
        SeedContextSpec {
            seed: single(EmbeddingKind::Sgns),
            context: VectorSource::Concat { embeddings: vec![EmbeddingKind::Sgns, EmbeddingKind::Char] },
        },
        vocab,
    );
    c.hidden = hidden;
    c.embed_dim = 16;
    c.rnn = rnn;
    c
}

fn random_embeddings(rng: &mut RngStream) -> Embeddings {
    let mut v = || Some((0..EMBEDDING_DIM).map(|_| rng.normal() as f32 * 0.5).collect());
    Embeddings { sgns: v(), char: v(), electra: v() }
}

fn setup(model: &DefmodModel, rng: &mut RngStream, rows: usize) -> (State, Tensor) {
    let embs: Vec<Embeddings> = (0..rows).map(|_| random_embeddings(rng)).collect();
    let batch: Vec<(&str, &Embeddings)> = embs.iter().map(|e| ("x", e)).collect();
    let (s, c) = model.inputs(&batch).unwrap();
    model.initial_state(&s, &c).unwrap()
}

fn set_param(model: &mut DefmodModel, name: &str, value: f32) {
    let id = model.params().id(name).unwrap();
    model.params_mut().value_mut(id).data_mut().fill(value);
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-vector times `[in, out]` matrix plus bias, computed directly.
fn affine(x: &[f32], w: &Tensor, b: &Tensor) -> Vec<f32> {
    let out = w.shape()[1];
    (0..out).map(|j| x.iter().enumerate().map(|(i, v)| v * w.data()[i * out + j]).sum::<f32>() + b.data()[j]).collect()
}

fn param<'a>(model: &'a DefmodModel, name: &str) -> &'a Tensor {
    model.params().value(model.params().id(name).unwrap())
}

#[test]
fn gate_closed_is_rnn_path() {
    for rnn in [RnnKind::Gru, RnnKind::Lstm] {
        let mut rng = RngStream::new(1, 0);
        let mut model = DefmodModel::new(small_config(12, 8, rnn), &mut rng).unwrap();
        set_param(&mut model, "gate.wz", 0.0);
        set_param(&mut model, "gate.bz", -20.0);
        let (state, ctx) = setup(&model, &mut rng, 3);
        let tr = model.step_trace(&[BOS, 5, 7], &state, &ctx).unwrap();
        assert!(max_abs_diff(tr.output.data(), tr.rnn_out.data()) < 1e-6);
        // Logits recomputed from the RNN output alone.
        let (w, b) = (param(&model, "out.w"), param(&model, "out.b"));
        for i in 0..3 {
            let logits = affine(tr.rnn_out.row(i), w, b);
            let m = logits.iter().cloned().fold(f32::MIN, f32::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f32>().ln();
            let expect: Vec<f32> = logits.iter().map(|l| l - lse).collect();
            assert!(max_abs_diff(tr.log_probs.row(i), &expect) < 1e-5);
        }
    }
}

#[test]
fn gate_open_is_candidate_path() {
    let mut rng = RngStream::new(2, 0);
    let mut model = DefmodModel::new(small_config(12, 8, RnnKind::Gru), &mut rng).unwrap();
    set_param(&mut model, "gate.wz", 0.0);
    set_param(&mut model, "gate.bz", 20.0);
    let (state, ctx) = setup(&model, &mut rng, 2);
    let tr = model.step_trace(&[BOS, BOS], &state, &ctx).unwrap();
    assert!(max_abs_diff(tr.output.data(), tr.candidate.data()) < 1e-6);
    for i in 0..2 {
        let (c, h) = (ctx.row(i), tr.rnn_out.row(i));
        let ch: Vec<f32> = c.iter().chain(h).copied().collect();
        let r: Vec<f32> =
            affine(&ch, param(&model, "gate.wr"), param(&model, "gate.br")).into_iter().map(sigmoid).collect();
        let rch: Vec<f32> = c.iter().zip(&r).map(|(a, b)| a * b).chain(h.iter().copied()).collect();
        let cand: Vec<f32> =
            affine(&rch, param(&model, "gate.wh"), param(&model, "gate.bh")).into_iter().map(f32::tanh).collect();
        assert!(max_abs_diff(tr.output.row(i), &cand) < 1e-5);
    }
}

#[test]
fn context_width_mismatch_is_an_error() {
    let mut rng = RngStream::new(3, 0);
    let model = DefmodModel::new(small_config(12, 8, RnnKind::Gru), &mut rng).unwrap();
    let (state, _) = setup(&model, &mut rng, 1);
    let bad = Tensor::zeros(&[1, 100]);
    assert!(matches!(model.forward_step(&[BOS], &state, &bad), Err(Error::Shape { .. })));
}

#[test]
fn missing_embedding_names_the_record() {
    let mut rng = RngStream::new(4, 0);
    let model = DefmodModel::new(small_config(12, 8, RnnKind::Gru), &mut rng).unwrap();
    let mut e = random_embeddings(&mut rng);
    e.char = None;
    let err = model.inputs(&[("es.train.17", &e)]).unwrap_err();
    assert!(err.to_string().contains("es.train.17") && err.to_string().contains("char"));
    let spec = SeedContextSpec { seed: single(EmbeddingKind::Sgns), context: VectorSource::allvec(Language::En) };
    assert!(spec.check_language(Language::En).is_ok());
    assert!(spec.check_language(Language::Es).is_err());
    assert!(SeedContextSpec { seed: single(EmbeddingKind::Sgns), context: VectorSource::allvec(Language::Es) }
        .check_language(Language::Es)
        .is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn step_log_probs_normalised(seed in 0u64..10_000, lstm in any::<bool>(), mlp in any::<bool>()) {
        let mut rng = RngStream::new(seed, 0);
        let mut cfg = small_config(30, 6, if lstm { RnnKind::Lstm } else { RnnKind::Gru });
        if mlp {
            cfg.spec.context = VectorSource::Mlp { embeddings: EmbeddingKind::ALL.to_vec(), hidden: 5 };
        }
        let model = DefmodModel::new(cfg, &mut rng).unwrap();
        let (mut state, ctx) = setup(&model, &mut rng, 2);
        let mut prev = vec![BOS, BOS];
        for _ in 0..4 {
            let (lp, next) = model.forward_step(&prev, &state, &ctx).unwrap();
            for i in 0..2 {
                let total: f64 = lp.row(i).iter().map(|&x| (x as f64).exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-5);
            }
            prev = vec![4 + rng.below(26), 4 + rng.below(26)];
            state = next;
        }
    }
}

/// Deterministic toy language model: next-token distribution is a fixed
/// pseudo-random function of the prefix.
struct HashModel {
    vocab: usize,
    salt: u64,
}

impl StepModel for HashModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, prev: &[usize], states: &[Vec<usize>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
        let mut lps = Vec::new();
        let mut next = Vec::new();
        for (p, s) in prev.iter().zip(states) {
            let mut prefix = s.clone();
            if *p != BOS || !s.is_empty() {
                prefix.push(*p);
            }
            let mut h = self.salt;
            for &t in &prefix {
                h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 1);
            }
            let mut r = RngStream::new(h, 7);
            let logits: Vec<f64> = (0..self.vocab).map(|_| r.normal() * 2.0).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            lps.push(logits.iter().map(|l| l - lse).collect());
            next.push(prefix);
        }
        Ok((lps, next))
    }
}

/// `P(first = target) = 1`, then `P(eos) = 1`.
struct ChainModel {
    target: usize,
}

impl StepModel for ChainModel {
    type State = usize;

    fn vocab_size(&self) -> usize {
        7
    }

    fn initial(&self) -> usize {
        0
    }

    fn step(&self, _prev: &[usize], states: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let rows = states
            .iter()
            .map(|&t| {
                let hot = if t == 0 { self.target } else { EOS };
                (0..7).map(|v| if v == hot { 0.0 } else { f64::NEG_INFINITY }).collect()
            })
            .collect();
        Ok((rows, states.iter().map(|t| t + 1).collect()))
    }
}

#[test]
fn deterministic_chain() {
    let m = ChainModel { target: 5 };
    let seq = beam_search(&m, 4, 64).unwrap();
    assert_eq!(seq.tokens, vec![BOS, 5, EOS]);
    assert_eq!(seq.log_prob, 0.0);
    assert_eq!(greedy_decode(&m, 64).unwrap().tokens, vec![BOS, 5, EOS]);
}

#[test]
fn beam_width_zero_rejected() {
    assert!(matches!(beam_search(&ChainModel { target: 4 }, 0, 5), Err(Error::Config(_))));
}

#[test]
fn wide_beam_matches_exhaustive_on_hashed_models() {
    // Vocabulary of 7 ids with pad and bos banned leaves 5 generatable tokens.
    for salt in 0..50 {
        let m = HashModel { vocab: 7, salt };
        let b = beam_search(&m, 125, 3).unwrap();
        let e = exhaustive_search(&m, 3).unwrap();
        assert_eq!(b.tokens, e.tokens, "salt {salt}");
        assert!((b.log_prob - e.log_prob).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_matches_exhaustive_on_defmod() {
    for draw in 0..50 {
        let mut rng = RngStream::new(100 + draw, 0);
        let mut cfg = small_config(7, 5, if draw % 2 == 0 { RnnKind::Gru } else { RnnKind::Lstm });
        cfg.max_len = 3;
        let mut model = DefmodModel::new(cfg, &mut rng).unwrap();
        // Sharper distributions make the search less trivial.
        let id = model.params().id("out.w").unwrap();
        model.params_mut().value_mut(id).data_mut().iter_mut().for_each(|w| *w *= 4.0);
        let e = random_embeddings(&mut rng);
        let cond = model.conditioned("x", &e).unwrap();
        let b = beam_search(&cond, 125, 3).unwrap();
        let x = exhaustive_search(&cond, 3).unwrap();
        assert_eq!(b.tokens, x.tokens, "draw {draw}");
        assert!((b.log_prob - x.log_prob).abs() < 1e-9);
    }
}

#[test]
fn width_one_is_greedy() {
    for salt in 0..40 {
        let m = HashModel { vocab: 9, salt };
        assert_eq!(beam_search(&m, 1, 6).unwrap(), greedy_decode(&m, 6).unwrap(), "salt {salt}");
    }
    let mut rng = RngStream::new(9, 0);
    let model = DefmodModel::new(small_config(20, 8, RnnKind::Gru), &mut rng).unwrap();
    let e = random_embeddings(&mut rng);
    let cond = model.conditioned("x", &e).unwrap();
    assert_eq!(beam_search(&cond, 1, 10).unwrap(), greedy_decode(&cond, 10).unwrap());
}

#[test]
fn max_len_forces_eos() {
    let m = HashModel { vocab: 40, salt: 3 };
    let seq = beam_search(&m, 3, 2).unwrap();
    assert!(seq.tokens.len() <= 4);
    assert_eq!(*seq.tokens.last().unwrap(), EOS);
}

#[test]
fn exhaustive_never_scores_below_greedy() {
    for salt in 0..20 {
        let m = HashModel { vocab: 8, salt };
        let g = greedy_decode(&m, 4).unwrap();
        let e = exhaustive_search(&m, 4).unwrap();
        assert!(e.log_prob >= g.log_prob - 1e-12);
    }
}

#[test]
fn early_stop_fires_on_the_eleventh_flat_epoch() {
    let mut es = EarlyStopping::new(10, 1e-3);
    for epoch in 1..=11 {
        let (_, stop) = es.observe(1.0);
        assert_eq!(stop, epoch == 11, "epoch {epoch}");
    }
}

#[test]
fn early_stop_threshold_is_relative() {
    let mut es = EarlyStopping::new(2, 1e-3);
    es.observe(100.0);
    // 0.05% better: not progress.
    assert!(!es.observe(99.95).0);
    assert!(es.observe(99.8).0);
    assert_eq!(es.best(), Some(99.8));
}

/// Examples whose gloss tokens are a function of the sgns vector, so there
/// is something to learn.
fn toy_examples(n: usize, vocab: usize, rng: &mut RngStream) -> Vec<Example> {
    let classes = 5;
    let protos: Vec<Embeddings> = (0..classes).map(|_| random_embeddings(rng)).collect();
    let words: Vec<Vec<usize>> =
        (0..classes).map(|_| (0..3 + rng.below(3)).map(|_| 4 + rng.below(vocab - 4)).collect()).collect();
    (0..n)
        .map(|i| {
            let k = rng.below(classes);
            let mut e = protos[k].clone();
            for kind in EmbeddingKind::ALL {
                let v: Vec<f32> = e.get(kind).unwrap().iter().map(|x| x + rng.normal() as f32 * 0.05).collect();
                e.set(kind, Some(v));
            }
            Example {
                id: format!("toy.{i}"),
                tokens: words[k].clone(),
                seed: e.sgns.clone().unwrap(),
                context: [e.sgns.clone().unwrap(), e.char.clone().unwrap()].concat(),
            }
        })
        .collect()
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let vocab = 300;
    let mut rng = RngStream::new(5, 0);
    let model = DefmodModel::new(small_config(vocab, 32, RnnKind::Gru), &mut rng).unwrap();
    let ex = toy_examples(64, vocab, &mut rng);
    let loss = evaluate_loss(&model, &ex, 16).unwrap();
    let lnv = (vocab as f64).ln();
    assert!((loss - lnv).abs() < 0.05 * lnv, "loss {loss} vs ln V {lnv}");
}

#[test]
fn toy_training_reduces_loss_and_is_reproducible() {
    let vocab = 20;
    let run = || {
        let mut rng = RngStream::new(6, 0);
        let mut model = DefmodModel::new(small_config(vocab, 16, RnnKind::Gru), &mut rng).unwrap();
        let ex = toy_examples(50, vocab, &mut rng);
        let cfg = TrainConfig { epochs: 30, batch_size: 10, lr: 5e-3, ..TrainConfig::default() };
        let report = train(&mut model, &ex, &[], &cfg).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    assert_eq!(r1.epochs.len(), 30);
    let last = r1.epochs.last().unwrap().train_loss;
    assert!(last < r1.initial_train_loss, "{last} vs {}", r1.initial_train_loss);
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1.params().to_bytes(), m2.params().to_bytes());
}

#[test]
fn decoding_is_repeatable_and_survives_checkpoint() {
    let mut rng = RngStream::new(8, 0);
    let pieces: Vec<Piece> =
        ["a", "b", "c", "▁", "ab", "ca"].iter().map(|t| Piece { text: t.to_string(), logprob: -1.5 }).collect();
    let tok = TokenizerModel::from_pieces(pieces, 1.0).unwrap();
    let mut model = DefmodModel::new(small_config(tok.vocab_size(), 12, RnnKind::Lstm), &mut rng).unwrap();
    model.set_vocab_fingerprint(tok.fingerprint());
    let e = random_embeddings(&mut rng);
    let a = model.generate("x", &e, 4).unwrap();
    let b = model.generate("x", &e, 4).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = DefmodModel::load(dir.path(), Some(&tok)).unwrap();
    assert_eq!(loaded.params().to_bytes(), model.params().to_bytes());
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.generate("x", &e, 4).unwrap(), a);

    let other = TokenizerModel::from_pieces(vec![Piece { text: "z".into(), logprob: -1.0 }], 1.0).unwrap();
    assert!(DefmodModel::load(dir.path(), Some(&other)).is_err());
}

#[test]
fn glove_table_shape_checked() {
    let mut rng = RngStream::new(10, 0);
    let mut model = DefmodModel::new(small_config(12, 4, RnnKind::Gru), &mut rng).unwrap();
    assert!(model.set_embeddings(&Tensor::zeros(&[12, 16])).is_ok());
    assert!(model.set_embeddings(&Tensor::zeros(&[12, 15])).is_err());
}

struct Fixed(&'static str);

impl GlossGenerator for Fixed {
    fn generate_text(&self, _id: &str, _e: &Embeddings) -> Result<String> {
        Ok(self.0.to_string())
    }
}

struct Panics;

impl GlossGenerator for Panics {
    fn generate_text(&self, _id: &str, _e: &Embeddings) -> Result<String> {
        panic!("fallback must not be consulted");
    }
}

#[test]
fn fallback_rules() {
    let e = Embeddings::default();
    let g = generate_with_fallback(&Fixed(""), Some(&Fixed("a fool")), "x", &e).unwrap();
    assert_eq!(g.text, "a fool");
    assert!(g.used_fallback && !g.deformed);

    let g = generate_with_fallback(&Fixed("a fool"), Some(&Panics), "x", &e).unwrap();
    assert_eq!(g.text, "a fool");
    assert!(!g.used_fallback);

    let g = generate_with_fallback(&Fixed("???"), Some(&Fixed("to cut")), "x", &e).unwrap();
    assert_eq!(g.text, "to cut");

    let g = generate_with_fallback(&Fixed("?"), Some(&Fixed("1")), "x", &e).unwrap();
    assert_eq!(g.text, "?");
    assert!(g.deformed && !g.used_fallback);
}

#[test]
fn deformed_detection() {
    for s in ["", "a", " x ", "???", "12 34", "⁇"] {
        assert!(is_deformed(s), "{s:?}");
    }
    for s in ["ab", "a fool", "to cut", "глупец", "1 b"] {
        assert!(!is_deformed(s), "{s:?}");
    }
}

#[test]
fn init_is_seeded() {
    let a = DefmodModel::new(small_config(12, 4, RnnKind::Gru), &mut RngStream::new(1, 1)).unwrap();
    let b = DefmodModel::new(small_config(12, 4, RnnKind::Gru), &mut RngStream::new(1, 1)).unwrap();
    assert_eq!(a.params().to_bytes(), b.params().to_bytes());
    let bad = DefmodConfig { dropout_input: 1.0, ..small_config(12, 4, RnnKind::Gru) };
    assert!(matches!(DefmodModel::new(bad, &mut RngStream::new(1, 1)), Err(Error::Config(_))));
}

#[test]
fn sequence_content_strips_markers() {
    let m = HashModel { vocab: 12, salt: 1 };
    let seq = beam_search(&m, 4, 5).unwrap();
    assert_eq!(seq.tokens[0], BOS);
    assert!(!seq.content().contains(&EOS));
    assert_eq!(seq.content().len() + 2, seq.tokens.len());
}
