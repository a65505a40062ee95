//! Synthetic CODWOE-shaped datasets.
//!
//! Words live in a small latent space grouped by topic. A gloss is a few
//! words of one topic and the headword's vectors are noisy projections of
//! the mean latent of those words, so both directions (gloss to vector and
//! vector to gloss) are learnable. The surface forms exercise the corpus
//! transform: multi-sense "; " joins, capitalisation with a trailing full
//! stop and, outside English, "(Label) " prefixes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingKind, Embeddings, GlossRecord, Language, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::rng::RngStream;

const LATENT: usize = 16;
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const FUNCTION_WORDS: [&str; 6] = ["a", "the", "of", "to", "or", "in"];
const LABELS: [&str; 4] = ["Figuré", "Familier", "Vieilli", "Botanique"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub language: Language,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Content words per sense, inclusive range.
    pub min_words: usize,
    pub max_words: usize,
    /// Standard deviation of the noise added to every vector.
    pub noise: f64,
    pub multi_sense_rate: f64,
    pub capitalise_rate: f64,
    /// Share of glosses with a parenthesised label; ignored for English.
    pub label_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            language: Language::En,
            topics: 12,
            words_per_topic: 40,
            min_words: 3,
            max_words: 8,
            noise: 0.2,
            multi_sense_rate: 0.1,
            capitalise_rate: 0.3,
            label_rate: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.words_per_topic == 0 || self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::config("synth needs topics, words per topic and 0 < min_words <= max_words"));
        }
        for (name, r) in [
            ("multi_sense_rate", self.multi_sense_rate),
            ("capitalise_rate", self.capitalise_rate),
            ("label_rate", self.label_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        Ok(())
    }
}

struct Lexicon {
    words: Vec<String>,
    latent: Vec<[f64; LATENT]>,
    /// Index range of each topic's words.
    topics: Vec<std::ops::Range<usize>>,
}

/// `min` or `min + 1` consonant-vowel syllables.
fn pseudo_word(rng: &mut RngStream, min: usize) -> String {
    let syllables = min + rng.below(2);
    (0..syllables).map(|_| format!("{}{}", ONSETS[rng.below(ONSETS.len())], VOWELS[rng.below(VOWELS.len())])).collect()
}

fn lexicon(cfg: &SynthConfig, rng: &mut RngStream) -> Lexicon {
    let mut seen: BTreeSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let mut lex = Lexicon { words: Vec::new(), latent: Vec::new(), topics: Vec::new() };
    for _ in 0..cfg.topics {
        let mut centre = [0.0; LATENT];
        centre.iter_mut().for_each(|c| *c = rng.normal());
        let start = lex.words.len();
        while lex.words.len() < start + cfg.words_per_topic {
            let w = pseudo_word(rng, 2);
            if seen.insert(w.clone()) {
                let mut z = centre;
                z.iter_mut().for_each(|c| *c += 0.5 * rng.normal());
                lex.words.push(w);
                lex.latent.push(z);
            }
        }
        lex.topics.push(start..lex.words.len());
    }
    lex
}

/// Random projection from the latent space, scaled to unit output variance.
fn projection(rng: &mut RngStream) -> Vec<f64> {
    let s = 1.0 / (LATENT as f64 * 1.25).sqrt();
    (0..EMBEDDING_DIM * LATENT).map(|_| rng.normal() * s).collect()
}

fn project(a: &[f64], z: &[f64; LATENT], noise: f64, rng: &mut RngStream) -> Vec<f32> {
    (0..EMBEDDING_DIM)
        .map(|r| {
            let v: f64 = a[r * LATENT..(r + 1) * LATENT].iter().zip(z).map(|(x, y)| x * y).sum();
            (v + noise * rng.normal()) as f32
        })
        .collect()
}

/// Hashed character trigrams of the headword, mixed with a little meaning.
fn char_vector(word: &str, a: &[f64], z: &[f64; LATENT], noise: f64, rng: &mut RngStream) -> Vec<f32> {
    let chars: Vec<char> = format!("<{word}>").chars().collect();
    let mut v = vec![0.0f64; EMBEDDING_DIM];
    for w in chars.windows(3) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in w {
            h = (h ^ *c as u64).wrapping_mul(0x0100_0000_01b3);
        }
        v[(h % EMBEDDING_DIM as u64) as usize] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let sem = project(a, z, noise, rng);
    v.iter().zip(sem).map(|(x, s)| (4.0 * x / n + 0.3 * s as f64) as f32).collect()
}

fn sense(cfg: &SynthConfig, lex: &Lexicon, rng: &mut RngStream) -> (String, [f64; LATENT]) {
    let topic = lex.topics[rng.below(lex.topics.len())].clone();
    let k = cfg.min_words + rng.below(cfg.max_words - cfg.min_words + 1);
    let mut words = Vec::new();
    let mut z = [0.0; LATENT];
    for i in 0..k {
        if i > 0 && rng.uniform() < 0.3 {
            words.push(FUNCTION_WORDS[rng.below(FUNCTION_WORDS.len())].to_string());
        }
        // Squaring the uniform favours the first words of a topic.
        let u = rng.uniform();
        let w = topic.start + ((u * u) * topic.len() as f64) as usize;
        words.push(lex.words[w].clone());
        for (a, b) in z.iter_mut().zip(&lex.latent[w]) {
            *a += b / k as f64;
        }
    }
    (words.join(" "), z)
}

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Generates the named splits from one lexicon and one set of projections.
/// Record ids follow `{lang}.{split}.{index}`.
pub fn generate(cfg: &SynthConfig, splits: &[(&str, usize)]) -> Result<BTreeMap<String, Vec<GlossRecord>>> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, 0x7379_6e74);
    let lex = lexicon(cfg, &mut root.split(1));
    let mut prng = root.split(2);
    let kinds = cfg.language.embedding_kinds();
    let proj: BTreeMap<EmbeddingKind, Vec<f64>> = kinds.iter().map(|&k| (k, projection(&mut prng))).collect();
    let mut headwords: BTreeSet<String> = lex.words.iter().cloned().collect();
    let mut out = BTreeMap::new();
    for (si, &(split, n)) in splits.iter().enumerate() {
        if out.contains_key(split) {
            return Err(Error::config(format!("split {split} listed twice")));
        }
        let mut rng = root.split(100 + si as u64);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let (mut gloss, mut z) = sense(cfg, &lex, &mut rng);
            if rng.uniform() < cfg.multi_sense_rate {
                let (g2, z2) = sense(cfg, &lex, &mut rng);
                gloss = format!("{gloss}; {g2}");
                for (a, b) in z.iter_mut().zip(z2) {
                    *a = 0.5 * (*a + b);
                }
            }
            if rng.uniform() < cfg.capitalise_rate {
                gloss = format!("{}.", capitalise(&gloss));
            }
            if cfg.language != Language::En && rng.uniform() < cfg.label_rate {
                gloss = format!("({}) {gloss}", LABELS[rng.below(LABELS.len())]);
            }
            let word = loop {
                let w = pseudo_word(&mut rng, 3);
                if headwords.insert(w.clone()) {
                    break w;
                }
            };
            let mut emb = Embeddings::default();
            for &k in kinds {
                let a = &proj[&k];
                let v = match k {
                    EmbeddingKind::Char => char_vector(&word, a, &z, cfg.noise, &mut rng),
                    _ => project(a, &z, cfg.noise, &mut rng),
                };
                emb.set(k, Some(v));
            }
            records.push(GlossRecord {
                id: format!("{}.{split}.{i}", cfg.language.code()),
                word: Some(word),
                gloss,
                embeddings: emb,
                language: cfg.language,
            });
        }
        out.insert(split.to_string(), records);
    }
    Ok(out)
}
