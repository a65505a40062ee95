//! Unigram training: seed vocabulary, EM, and likelihood-based pruning.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::lattice::{expected_counts, viterbi};
use super::{Piece, TokenizerModel, NUM_SPECIALS, SPACE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Final number of ids, specials included.
    pub vocab_size: usize,
    /// Seed candidates kept before EM; `None` means 20 × `vocab_size`.
    pub seed_size: Option<usize>,
    pub char_coverage: f64,
    pub max_piece_chars: usize,
    pub em_iterations: usize,
    pub shrink: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            vocab_size: 8000,
            seed_size: None,
            char_coverage: 1.0,
            max_piece_chars: 16,
            em_iterations: 2,
            shrink: 0.75,
        }
    }
}

/// Corpus log-likelihood per character at every E-step, grouped by pruning
/// round. Values within a round come from a fixed vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub rounds: Vec<Vec<f64>>,
    pub seed_pieces: usize,
    pub required_chars: usize,
}

struct Corpus {
    /// Unique words (a word starts at `▁` or at the start of a text) with counts.
    words: Vec<(String, f64)>,
    total_chars: f64,
}

fn split_words(text: &str, out: &mut BTreeMap<String, u64>) {
    let t = super::to_internal(text);
    let mut start = 0;
    for (i, c) in t.char_indices() {
        if c == SPACE && i > start {
            *out.entry(t[start..i].to_string()).or_default() += 1;
            start = i;
        }
    }
    if start < t.len() {
        *out.entry(t[start..].to_string()).or_default() += 1;
    }
}

struct Vocab {
    pieces: Vec<String>,
    logp: Vec<f64>,
    required: Vec<bool>,
    index: HashMap<String, usize>,
    max_chars: usize,
}

impl Vocab {
    fn new(entries: Vec<(String, f64, bool)>, max_chars: usize) -> Self {
        let mut v = Vocab {
            pieces: Vec::with_capacity(entries.len()),
            logp: Vec::with_capacity(entries.len()),
            required: Vec::with_capacity(entries.len()),
            index: HashMap::with_capacity(entries.len()),
            max_chars,
        };
        for (i, (p, lp, req)) in entries.into_iter().enumerate() {
            v.index.insert(p.clone(), i);
            v.pieces.push(p);
            v.logp.push(lp);
            v.required.push(req);
        }
        v
    }

    fn len(&self) -> usize {
        self.pieces.len()
    }

    fn lookup(&self, s: &str) -> Option<(usize, f64)> {
        self.index.get(s).map(|&i| (i, self.logp[i]))
    }
}

/// Unknown characters never reach the vocabulary; a constant penalty keeps
/// them out of the likelihood comparison between iterations.
const UNK_LOGPROB: f64 = -30.0;

fn e_step(corpus: &Corpus, vocab: &Vocab) -> (f64, Vec<f64>) {
    let mut counts = vec![0.0f64; vocab.len()];
    let mut ll = 0.0;
    for (w, c) in &corpus.words {
        let z = expected_counts(
            w,
            vocab.max_chars,
            UNK_LOGPROB,
            |s| vocab.lookup(s),
            |id, p| {
                counts[id] += c * p;
            },
        );
        ll += c * z;
    }
    (ll / corpus.total_chars, counts)
}

/// Maximum-likelihood re-estimate. Required characters keep a tiny floor so
/// every covered character stays segmentable.
fn m_step(vocab: &mut Vocab, counts: &[f64]) {
    let total: f64 = counts.iter().sum();
    let floor = 1e-12 * total;
    let adj: Vec<f64> =
        counts.iter().zip(&vocab.required).map(|(&c, &req)| if req { c.max(floor) } else { c }).collect();
    let norm: f64 = adj.iter().sum();
    for (lp, c) in vocab.logp.iter_mut().zip(adj) {
        *lp = if c > 0.0 { (c / norm).ln() } else { f64::NEG_INFINITY };
    }
}

/// Keeps the pieces whose removal would cost the most likelihood.
fn prune(corpus: &Corpus, vocab: &Vocab, target: usize, shrink: f64) -> Vocab {
    let n = vocab.len();
    let mut freq = vec![0.0f64; n];
    let mut vsum = 0.0;
    for (w, c) in &corpus.words {
        vsum += c;
        for seg in viterbi(w, vocab.max_chars, UNK_LOGPROB, |s| vocab.lookup(s)) {
            if let Some(id) = seg.id {
                freq[id] += c;
            }
        }
    }
    let sum: f64 = freq.iter().sum();
    let logsum = sum.ln();
    let mut always = Vec::new();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for i in 0..n {
        if vocab.required[i] {
            always.push(i);
            continue;
        }
        if freq[i] == 0.0 || !vocab.logp[i].is_finite() {
            continue;
        }
        let alt =
            viterbi(&vocab.pieces[i], vocab.max_chars, UNK_LOGPROB, |s| vocab.lookup(s).filter(|&(id, _)| id != i));
        if alt.len() <= 1 {
            always.push(i);
            continue;
        }
        let f = freq[i] / vsum;
        let logprob_sp = freq[i].ln() - logsum;
        let logsum_alt = (sum + freq[i] * (alt.len() - 1) as f64).ln();
        let logprob_alt: f64 = alt
            .iter()
            .map(|seg| {
                let fa = seg.id.map_or(0.0, |id| freq[id]);
                (fa + freq[i]).ln() - logsum_alt
            })
            .sum();
        candidates.push((f * (logprob_sp - logprob_alt), i));
    }
    let keep_total = target.max((n as f64 * shrink) as usize);
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| vocab.pieces[a.1].cmp(&vocab.pieces[b.1])));
    let room = keep_total.saturating_sub(always.len());
    let mut keep: Vec<usize> = always;
    keep.extend(candidates.iter().take(room).map(|c| c.1));
    keep.sort_unstable();
    Vocab::new(
        keep.into_iter().map(|i| (vocab.pieces[i].clone(), vocab.logp[i], vocab.required[i])).collect(),
        vocab.max_chars,
    )
}

/// Seed candidates: substrings of the unique words that repeat with at
/// least two distinct right contexts (the internal nodes of a suffix tree
/// over the word list), scored by occurrences × length.
fn seed_substrings(words: &[(String, f64)], covered: &HashMap<char, bool>, max_chars: usize) -> Vec<(String, f64)> {
    #[derive(Default)]
    struct Stat {
        count: u64,
        next: Option<Option<char>>,
        branching: bool,
    }
    let mut stats: HashMap<&str, Stat> = HashMap::new();
    for (w, _) in words {
        let chars: Vec<(usize, char)> = w.char_indices().collect();
        let n = chars.len();
        let byte_at = |k: usize| if k == n { w.len() } else { chars[k].0 };
        for i in 0..n {
            for j in i + 1..=(i + max_chars).min(n) {
                let c = chars[j - 1].1;
                if !covered.get(&c).copied().unwrap_or(false) || (j - 1 > i && c == SPACE) {
                    break;
                }
                if j - i < 2 {
                    continue;
                }
                let next = if j < n { Some(chars[j].1) } else { None };
                let st = stats.entry(&w[byte_at(i)..byte_at(j)]).or_default();
                st.count += 1;
                match st.next {
                    None => st.next = Some(next),
                    Some(prev) if prev != next => st.branching = true,
                    _ => {}
                }
            }
        }
    }
    let mut out: Vec<(String, f64)> = stats
        .into_iter()
        .filter(|(_, st)| st.branching)
        .map(|(s, st)| (s.to_string(), (st.count * s.chars().count() as u64) as f64))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Trains a unigram model on `corpus`.
pub fn train<S: AsRef<str>>(corpus: &[S], config: &TrainerConfig) -> Result<(TokenizerModel, TrainReport)> {
    if !(config.shrink > 0.0 && config.shrink < 1.0) {
        return Err(Error::config(format!("shrink must lie in (0, 1), got {}", config.shrink)));
    }
    if !(config.char_coverage > 0.0 && config.char_coverage <= 1.0) {
        return Err(Error::config(format!("char_coverage must lie in (0, 1], got {}", config.char_coverage)));
    }
    if config.max_piece_chars == 0 || config.em_iterations == 0 {
        return Err(Error::config("max_piece_chars and em_iterations must be positive"));
    }
    let mut counted = BTreeMap::new();
    for s in corpus {
        split_words(s.as_ref(), &mut counted);
    }
    if counted.is_empty() {
        return Err(Error::Empty("tokenizer corpus"));
    }
    let mut char_freq: BTreeMap<char, f64> = BTreeMap::new();
    for (w, &c) in &counted {
        for ch in w.chars() {
            *char_freq.entry(ch).or_default() += c as f64;
        }
    }
    let total_chars: f64 = char_freq.values().sum();
    let mut by_freq: Vec<(char, f64)> = char_freq.iter().map(|(&c, &f)| (c, f)).collect();
    by_freq.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut required: Vec<(char, f64)> = Vec::new();
    let mut acc = 0.0;
    for &(c, f) in &by_freq {
        if config.char_coverage < 1.0 && acc >= config.char_coverage * total_chars {
            break;
        }
        acc += f;
        required.push((c, f));
    }
    let target = config.vocab_size.saturating_sub(NUM_SPECIALS);
    if target < required.len() {
        return Err(Error::config(format!(
            "vocab_size {} cannot hold {} required characters plus {NUM_SPECIALS} specials",
            config.vocab_size,
            required.len()
        )));
    }
    let covered: HashMap<char, bool> = by_freq.iter().map(|&(c, _)| (c, required.iter().any(|r| r.0 == c))).collect();
    let words: Vec<(String, f64)> = counted.into_iter().map(|(w, c)| (w, c as f64)).collect();
    let corpus = Corpus { words, total_chars };

    let seed_size = config.seed_size.unwrap_or(20 * config.vocab_size);
    let mut seeds = seed_substrings(&corpus.words, &covered, config.max_piece_chars);
    seeds.truncate(seed_size.saturating_sub(required.len()));
    let score_sum: f64 = required.iter().map(|r| r.1).sum::<f64>() + seeds.iter().map(|s| s.1).sum::<f64>();
    let mut entries: Vec<(String, f64, bool)> =
        required.iter().map(|&(c, f)| (c.to_string(), (f / score_sum).ln(), true)).collect();
    entries.extend(seeds.into_iter().map(|(s, f)| (s, (f / score_sum).ln(), false)));
    let mut report = TrainReport { seed_pieces: entries.len(), required_chars: required.len(), ..Default::default() };
    let mut vocab = Vocab::new(entries, config.max_piece_chars);

    loop {
        let mut lls = Vec::with_capacity(config.em_iterations);
        for _ in 0..config.em_iterations {
            let (ll, counts) = e_step(&corpus, &vocab);
            lls.push(ll);
            m_step(&mut vocab, &counts);
        }
        log::debug!("tokenizer round {}: {} pieces, ll/char {:?}", report.rounds.len(), vocab.len(), lls);
        report.rounds.push(lls);
        let live = vocab.logp.iter().filter(|lp| lp.is_finite()).count();
        if live <= target {
            break;
        }
        vocab = prune(&corpus, &vocab, target, config.shrink);
    }

    let mut pieces: Vec<Piece> = vocab
        .pieces
        .into_iter()
        .zip(vocab.logp)
        .filter(|(_, lp)| lp.is_finite())
        .map(|(text, logprob)| Piece { text, logprob: logprob.min(0.0) })
        .collect();
    pieces.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.text.cmp(&b.text)));
    let model = TokenizerModel::from_pieces(pieces, config.char_coverage)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_split_at_meta_symbol() {
        let mut m = BTreeMap::new();
        split_words("a fool  x", &mut m);
        let keys: Vec<&str> = m.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["a", "▁", "▁fool", "▁x"]);
    }

    #[test]
    fn seeds_are_branching_repeats() {
        let covered: HashMap<char, bool> = [('a', true), ('b', true)].into_iter().collect();
        let seeds = seed_substrings(&[("abab".into(), 2.0)], &covered, 16);
        assert_eq!(seeds, vec![("ab".to_string(), 4.0)]);
    }
}
