use glosslab::corpus::{
    dataset_to_json, parse_dataset, transform_dataset, vector_stats, EmbeddingKind, Language, LoadOptions,
};
use glosslab::synth::{generate, SynthConfig};

#[test]
fn splits_are_deterministic_and_well_formed() {
    let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
    let a = generate(&cfg, &[("train", 200), ("dev", 50)]).unwrap();
    let b = generate(&cfg, &[("train", 200), ("dev", 50)]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a["train"].len(), 200);
    assert_eq!(a["dev"][7].id, "en.dev.7");
    let other = generate(&SynthConfig { seed: 4, ..cfg.clone() }, &[("train", 200)]).unwrap();
    assert_ne!(other["train"], a["train"]);

    // Serialises to a file the strict loader accepts.
    let text = String::from_utf8(dataset_to_json(&a["train"]).unwrap()).unwrap();
    let back = parse_dataset(&text, Language::En, LoadOptions::default()).unwrap();
    assert_eq!(back.len(), 200);
    let words: std::collections::BTreeSet<_> = a.values().flatten().map(|r| r.word.clone().unwrap()).collect();
    assert_eq!(words.len(), 250, "headwords are unique");
}

#[test]
fn embedding_kinds_follow_language() {
    for lang in [Language::En, Language::It] {
        let d = generate(&SynthConfig { language: lang, ..SynthConfig::default() }, &[("train", 20)]).unwrap();
        for r in &d["train"] {
            for k in EmbeddingKind::ALL {
                assert_eq!(r.embeddings.get(k).is_some(), lang.embedding_kinds().contains(&k));
            }
        }
    }
}

#[test]
fn surface_forms_exercise_the_transform() {
    let cfg = SynthConfig { language: Language::Fr, multi_sense_rate: 0.5, label_rate: 0.5, ..SynthConfig::default() };
    let d = generate(&cfg, &[("train", 300)]).unwrap();
    let recs = &d["train"];
    assert!(recs.iter().any(|r| r.gloss.contains("; ")));
    assert!(recs.iter().any(|r| r.gloss.starts_with('(')));
    assert!(recs.iter().any(|r| r.gloss.ends_with('.')));
    let t = transform_dataset(recs).to_records(Language::Fr);
    assert!(t.len() > recs.len());
    for r in &t {
        assert!(!r.gloss.contains(';') && !r.gloss.starts_with('(') && !r.gloss.ends_with('.'), "{}", r.gloss);
    }
}

#[test]
fn vectors_have_unit_scale_and_meaning() {
    let d = generate(&SynthConfig::default(), &[("train", 400)]).unwrap();
    let recs = &d["train"];
    let s = vector_stats(recs, EmbeddingKind::Sgns).unwrap();
    assert!(s.mean.abs() < 0.2, "{s:?}");
    assert!((0.3..1.5).contains(&s.abs_mean), "{s:?}");
    // Glosses sharing most words have closer sgns vectors than random pairs.
    let cos = |a: &[f32], b: &[f32]| {
        let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f32>().sqrt() * b.iter().map(|x| x * x).sum::<f32>().sqrt())
    };
    let words = |g: &str| {
        g.to_lowercase().replace(['.', ';'], "").split(' ').map(String::from).collect::<std::collections::BTreeSet<_>>()
    };
    let (mut near, mut far, mut nn, mut nf) = (0.0, 0.0, 0, 0);
    for i in 0..recs.len() {
        for j in i + 1..recs.len() {
            let (a, b) = (words(&recs[i].gloss), words(&recs[j].gloss));
            let c = cos(recs[i].embeddings.sgns.as_ref().unwrap(), recs[j].embeddings.sgns.as_ref().unwrap());
            if a.intersection(&b).count() >= 2 {
                near += c;
                nn += 1;
            } else if a.is_disjoint(&b) {
                far += c;
                nf += 1;
            }
        }
    }
    assert!(nn > 0 && near / nn as f32 > far / nf as f32 + 0.2, "{} vs {}", near / nn as f32, far / nf as f32);
}

#[test]
fn invalid_configs_rejected() {
    assert!(generate(&SynthConfig { min_words: 5, max_words: 2, ..SynthConfig::default() }, &[("t", 1)]).is_err());
    assert!(generate(&SynthConfig { label_rate: 2.0, ..SynthConfig::default() }, &[("t", 1)]).is_err());
    assert!(generate(&SynthConfig::default(), &[("t", 1), ("t", 2)]).is_err());
}
