use glosslab::glove::{
    build_cooc, gloss_vector_tfidf, load_embeddings, save_embeddings, tfidf_weights, train_glove, weight, CoocMatrix,
    GloveConfig, GloveModel, IdfTable,
};
use glosslab::rng::RngStream;
use glosslab::tensor::{dot, Tensor};
use glosslab::tokenizer::{train, TrainerConfig};
use proptest::prelude::*;

fn small(iterations: usize) -> GloveConfig {
    GloveConfig { dim: 16, iterations, ..GloveConfig::default() }
}

#[test]
fn two_token_corpus() {
    let e = std::f64::consts::E;
    let cooc = CoocMatrix { entries: vec![(0, 1, e), (1, 0, e)], window: 1, symmetric: true };
    let zero =
        GloveModel { dim: 256, vocab: 2, main: vec![0.0; 514], context: vec![0.0; 514], x_max: 10.0, alpha: 0.75 };
    let fe = weight(e, 10.0, 0.75);
    assert!((zero.objective(&cooc) - 2.0 * fe).abs() < 1e-12);
    let (_, report) = train_glove(&cooc, 2, &GloveConfig::default()).unwrap();
    let (first, last) = (report.objective[0], *report.objective.last().unwrap());
    assert_eq!(report.objective.len(), 51);
    assert!(last <= 0.1 * first, "{first} -> {last}");
}

fn toy_sequences(rng: &mut RngStream) -> Vec<Vec<usize>> {
    (0..60)
        .map(|_| {
            let topic = rng.below(3) * 5;
            (0..2 + rng.below(6)).map(|_| 4 + topic + rng.below(5)).collect()
        })
        .collect()
}

#[test]
fn objective_non_increasing() {
    let mut rng = RngStream::new(9, 0);
    let cooc = build_cooc(&toy_sequences(&mut rng), 10).unwrap();
    let (model, report) = train_glove(&cooc, 20, &small(50)).unwrap();
    assert!(model.is_finite());
    for w in report.objective.windows(2) {
        assert!(w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn deterministic_and_hogwild_finite() {
    let mut rng = RngStream::new(2, 0);
    let cooc = build_cooc(&toy_sequences(&mut rng), 10).unwrap();
    let a = train_glove(&cooc, 20, &small(5)).unwrap().0;
    let b = train_glove(&cooc, 20, &small(5)).unwrap().0;
    assert_eq!(a, b);
    let par = GloveConfig { threads: 2, ..small(5) };
    assert!(train_glove(&cooc, 20, &par).unwrap().0.is_finite());
}

#[test]
fn tfidf_hand_computed() {
    // glosses: [1,2], [2,3], [2,2,4]; N = 3
    let seqs = vec![vec![1, 2], vec![2, 3], vec![2, 2, 4]];
    let idf = IdfTable::build(&seqs);
    let ln3 = 3f64.ln();
    assert!((idf.get(1) - ln3).abs() < 1e-12);
    assert_eq!(idf.get(2), 0.0);
    let w = tfidf_weights(&[4, 2, 4], &idf);
    assert_eq!(w[0].0, 4);
    assert!((w[0].1 - 2.0 * ln3).abs() < 1e-12);
    assert_eq!(w[1], (2, 0.0));
}

#[test]
fn tfidf_vectors() {
    let mut rng = RngStream::new(4, 0);
    let table = Tensor::uniform(&[6, 8], 1.0, &mut rng);
    let idf = IdfTable::build(&[vec![1, 2], vec![3], vec![4, 5]]);
    let single = gloss_vector_tfidf(&[1], &table, &idf);
    let n: f32 = dot(table.row(1), table.row(1)).sqrt();
    for (a, b) in single.iter().zip(table.row(1)) {
        assert!((a - b / n).abs() < 1e-6);
    }
    assert_eq!(gloss_vector_tfidf(&[1, 1], &table, &idf), single);
    assert!(gloss_vector_tfidf(&[0], &table, &idf).iter().all(|v| *v == 0.0));
}

proptest! {
    #[test]
    fn symmetric_roles_swap(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let cooc = build_cooc(&toy_sequences(&mut rng), 4).unwrap();
        for e in &cooc.entries {
            prop_assert_eq!(cooc.get(e.1, e.0), e.2);
        }
        let m = GloveModel::new(20, 8, 10.0, 0.75, &mut rng);
        let swapped = GloveModel { main: m.context.clone(), context: m.main.clone(), ..m.clone() };
        let (a, b) = (m.objective(&cooc), swapped.objective(&cooc));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn tfidf_self_similarity(tokens in prop::collection::vec(1usize..6, 1..8), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let table = Tensor::uniform(&[6, 8], 1.0, &mut rng);
        let idf = IdfTable::build(&[vec![1, 2], vec![3], vec![4, 5], vec![1]]);
        let v = gloss_vector_tfidf(&tokens, &table, &idf);
        if v.iter().any(|x| *x != 0.0) {
            prop_assert!((dot(&v, &v) - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn embedding_file_round_trip() {
    let (tok, _) =
        train(&["a fool", "an idiot", "a b"], &TrainerConfig { vocab_size: 30, ..Default::default() }).unwrap();
    let mut rng = RngStream::new(1, 0);
    let table = Tensor::uniform(&[tok.vocab_size(), 4], 1.0, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.txt");
    save_embeddings(&p, &tok, &table).unwrap();
    assert_eq!(load_embeddings(&p, &tok).unwrap(), table);
}
