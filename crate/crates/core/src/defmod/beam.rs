//! Length-synchronous decoding over any next-token model.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS, PAD};

/// A model that scores the next token of several prefixes at once.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn initial(&self) -> Self::State;
    /// Log-probabilities over the vocabulary for each prefix ending in
    /// `prev[i]`, plus the successor states.
    fn step(&self, prev: &[usize], states: &[Self::State]) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

/// A decoded gloss: `tokens` starts with bos and ends with eos.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossSequence {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl GlossSequence {
    /// Tokens between bos and eos.
    pub fn content(&self) -> &[usize] {
        let n = self.tokens.len();
        &self.tokens[1..n.saturating_sub(1).max(1)]
    }
}

fn generatable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Higher score first, then the lexicographically smaller sequence.
fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn finish(mut body: Vec<usize>, log_prob: f64) -> GlossSequence {
    let mut tokens = Vec::with_capacity(body.len() + 2);
    tokens.push(BOS);
    tokens.append(&mut body);
    tokens.push(EOS);
    GlossSequence { tokens, log_prob }
}

/// Beam search without length normalisation. Every step keeps the best
/// `beam_width` expansions of the live beam; those ending in eos move to the
/// finished pool. After `max_len` tokens only eos is allowed. Pad and bos are
/// never generated.
pub fn beam_search<M: StepModel>(model: &M, beam_width: usize, max_len: usize) -> Result<GlossSequence> {
    if beam_width < 1 {
        return Err(Error::config("beam width must be at least 1"));
    }
    struct Hyp<S> {
        tokens: Vec<usize>,
        score: f64,
        state: S,
    }
    let mut alive = vec![Hyp { tokens: Vec::new(), score: 0.0, state: model.initial() }];
    let mut best: Option<(Vec<usize>, f64)> = None;
    for t in 0..=max_len {
        if alive.is_empty() {
            break;
        }
        let top_alive = alive.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if let Some((_, s)) = &best {
            // Log-probabilities only decrease as hypotheses grow.
            if *s > top_alive {
                break;
            }
        }
        let prev: Vec<usize> = alive.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
        let states: Vec<M::State> = alive.iter().map(|h| h.state.clone()).collect();
        let (lps, next) = model.step(&prev, &states)?;
        let mut cands: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (i, h) in alive.iter().enumerate() {
            for (tok, &lp) in lps[i].iter().enumerate() {
                if !generatable(tok) || (t == max_len && tok != EOS) || lp.is_nan() {
                    continue;
                }
                let mut seq = h.tokens.clone();
                seq.push(tok);
                cands.push((h.score + lp, seq, i));
            }
        }
        cands.sort_by(|a, b| better((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(beam_width);
        let mut next_alive = Vec::with_capacity(cands.len());
        for (score, seq, i) in cands {
            if *seq.last().unwrap() == EOS {
                let replace = match &best {
                    None => true,
                    Some((bs, bsc)) => better((score, &seq), (*bsc, bs)) == Ordering::Less,
                };
                if replace {
                    best = Some((seq, score));
                }
            } else {
                next_alive.push(Hyp { tokens: seq, score, state: next[i].clone() });
            }
        }
        alive = next_alive;
    }
    let (mut seq, score) = best.ok_or(Error::Empty("beam search finished no hypothesis"))?;
    seq.pop();
    Ok(finish(seq, score))
}

/// Repeatedly takes the most probable token (lowest id on ties).
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<GlossSequence> {
    let mut state = model.initial();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    loop {
        let prev = *tokens.last().unwrap_or(&BOS);
        let (lps, mut next) = model.step(&[prev], std::slice::from_ref(&state))?;
        let mut pick: Option<(usize, f64)> = None;
        for (tok, &lp) in lps[0].iter().enumerate() {
            if !generatable(tok) || (tokens.len() == max_len && tok != EOS) || lp.is_nan() {
                continue;
            }
            if pick.is_none_or(|(_, b)| lp > b) {
                pick = Some((tok, lp));
            }
        }
        let (tok, lp) = pick.ok_or(Error::Empty("no generatable token"))?;
        score += lp;
        if tok == EOS {
            return Ok(finish(tokens, score));
        }
        tokens.push(tok);
        state = next.swap_remove(0);
    }
}

/// Scores every sequence of at most `max_len` generatable tokens followed
/// by eos and returns the best under the beam search's ordering. Cost grows
/// as `|V|^max_len`; meant for checking the beam on toy models.
pub fn exhaustive_search<M: StepModel>(model: &M, max_len: usize) -> Result<GlossSequence> {
    fn walk<M: StepModel>(
        model: &M,
        prefix: &mut Vec<usize>,
        score: f64,
        state: M::State,
        max_len: usize,
        best: &mut Option<(Vec<usize>, f64)>,
    ) -> Result<()> {
        let prev = *prefix.last().unwrap_or(&BOS);
        let (lps, next) = model.step(&[prev], std::slice::from_ref(&state))?;
        for (tok, &lp) in lps[0].iter().enumerate() {
            if !generatable(tok) || lp.is_nan() {
                continue;
            }
            let s = score + lp;
            if tok == EOS {
                prefix.push(EOS);
                let replace = match best {
                    None => true,
                    Some((b, bs)) => better((s, prefix), (*bs, b)) == Ordering::Less,
                };
                if replace {
                    *best = Some((prefix.clone(), s));
                }
                prefix.pop();
            } else if prefix.len() < max_len {
                prefix.push(tok);
                walk(model, prefix, s, next[0].clone(), max_len, best)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    let mut best = None;
    walk(model, &mut Vec::new(), 0.0, model.initial(), max_len, &mut best)?;
    let (mut seq, score) = best.ok_or(Error::Empty("exhaustive search found no sequence"))?;
    seq.pop();
    Ok(finish(seq, score))
}
