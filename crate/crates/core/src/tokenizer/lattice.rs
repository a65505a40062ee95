//! Segmentation lattice over the characters of one string.

use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Segment {
    /// Byte range in the lattice string.
    pub start: usize,
    pub end: usize,
    /// `None` for an unknown single character.
    pub id: Option<usize>,
}

fn boundaries(s: &str) -> Vec<usize> {
    s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len())).collect()
}

/// Calls `f(end_char, id, logprob)` for every edge leaving character `i`.
/// A character with no single-character piece gets an unknown edge.
#[inline]
fn edges_from<L, F>(s: &str, b: &[usize], i: usize, max_chars: usize, unk_lp: f64, lookup: &L, mut f: F)
where
    L: Fn(&str) -> Option<(usize, f64)>,
    F: FnMut(usize, Option<usize>, f64),
{
    let n = b.len() - 1;
    for j in i + 1..=(i + max_chars).min(n) {
        match lookup(&s[b[i]..b[j]]) {
            Some((id, lp)) => f(j, Some(id), lp),
            None if j == i + 1 => f(j, None, unk_lp),
            None => {}
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Best segmentation by total log-probability. Near-ties (within 1e-12
/// relative) go to fewer pieces, then to the lexicographically smallest
/// first piece.
pub(crate) fn viterbi<L>(s: &str, max_chars: usize, unk_lp: f64, lookup: L) -> Vec<Segment>
where
    L: Fn(&str) -> Option<(usize, f64)>,
{
    let b = boundaries(s);
    let n = b.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    // best[i]: (score, pieces, end, id) of the best segmentation of the suffix at i.
    let mut best: Vec<(f64, usize, usize, Option<usize>)> = vec![(f64::NEG_INFINITY, 0, 0, None); n + 1];
    best[n] = (0.0, 0, n, None);
    for i in (0..n).rev() {
        let mut cur = best[i];
        edges_from(s, &b, i, max_chars, unk_lp, &lookup, |j, id, lp| {
            let (rest, rest_n, ..) = best[j];
            if rest == f64::NEG_INFINITY || lp == f64::NEG_INFINITY {
                return;
            }
            let cand = (lp + rest, rest_n + 1, j, id);
            if cur.0 == f64::NEG_INFINITY {
                cur = cand;
                return;
            }
            let tol = 1e-12 * cand.0.abs().max(1.0);
            let better = if (cand.0 - cur.0).abs() > tol {
                cand.0 > cur.0
            } else if cand.1 != cur.1 {
                cand.1 < cur.1
            } else {
                s[b[i]..b[j]] < s[b[i]..b[cur.2]]
            };
            if better {
                cur = cand;
            }
        });
        best[i] = cur;
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (_, _, j, id) = best[i];
        out.push(Segment { start: b[i], end: b[j], id });
        i = j;
    }
    out
}

/// Forward log-marginals `alpha[i]` over prefixes and the edges used, with
/// every log-probability scaled by `scale`.
fn forward<L>(s: &str, b: &[usize], max_chars: usize, unk_lp: f64, scale: f64, lookup: &L) -> Vec<f64>
where
    L: Fn(&str) -> Option<(usize, f64)>,
{
    let n = b.len() - 1;
    let mut alpha = vec![f64::NEG_INFINITY; n + 1];
    alpha[0] = 0.0;
    for i in 0..n {
        let a = alpha[i];
        if a == f64::NEG_INFINITY {
            continue;
        }
        edges_from(s, b, i, max_chars, unk_lp, lookup, |j, _, lp| {
            alpha[j] = log_add(alpha[j], a + scale * lp);
        });
    }
    alpha
}

/// Log-likelihood of `s` (all segmentations marginalised) and the posterior
/// expected count of every known piece, reported through `add(id, count)`.
pub(crate) fn expected_counts<L, A>(s: &str, max_chars: usize, unk_lp: f64, lookup: L, mut add: A) -> f64
where
    L: Fn(&str) -> Option<(usize, f64)>,
    A: FnMut(usize, f64),
{
    let b = boundaries(s);
    let n = b.len() - 1;
    if n == 0 {
        return 0.0;
    }
    let alpha = forward(s, &b, max_chars, unk_lp, 1.0, &lookup);
    let mut beta = vec![f64::NEG_INFINITY; n + 1];
    beta[n] = 0.0;
    for i in (0..n).rev() {
        let mut acc = f64::NEG_INFINITY;
        edges_from(s, &b, i, max_chars, unk_lp, &lookup, |j, _, lp| {
            acc = log_add(acc, lp + beta[j]);
        });
        beta[i] = acc;
    }
    let z = alpha[n];
    if z == f64::NEG_INFINITY {
        return z;
    }
    for i in 0..n {
        if alpha[i] == f64::NEG_INFINITY {
            continue;
        }
        edges_from(s, &b, i, max_chars, unk_lp, &lookup, |j, id, lp| {
            if let Some(id) = id {
                let post = (alpha[i] + lp + beta[j] - z).exp();
                if post > 0.0 {
                    add(id, post);
                }
            }
        });
    }
    z
}

/// Draws a segmentation with probability proportional to `P(seg)^alpha`.
pub(crate) fn sample<L>(
    s: &str,
    max_chars: usize,
    unk_lp: f64,
    alpha: f64,
    rng: &mut RngStream,
    lookup: L,
) -> Vec<Segment>
where
    L: Fn(&str) -> Option<(usize, f64)>,
{
    let b = boundaries(s);
    let n = b.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let fwd = forward(s, &b, max_chars, unk_lp, alpha, &lookup);
    let mut out = Vec::new();
    let mut j = n;
    while j > 0 {
        // Edges ending at j, weighted by fwd[i] + alpha·lp - fwd[j].
        let mut cands: Vec<(usize, Option<usize>, f64)> = Vec::new();
        for i in j.saturating_sub(max_chars)..j {
            if fwd[i] == f64::NEG_INFINITY {
                continue;
            }
            edges_from(s, &b, i, max_chars, unk_lp, &lookup, |e, id, lp| {
                if e == j {
                    cands.push((i, id, (fwd[i] + alpha * lp - fwd[j]).exp()));
                }
            });
        }
        let total: f64 = cands.iter().map(|c| c.2).sum();
        let mut u = rng.uniform() * total;
        let mut pick = cands[cands.len() - 1];
        for c in &cands {
            if u < c.2 {
                pick = *c;
                break;
            }
            u -= c.2;
        }
        out.push(Segment { start: b[pick.0], end: b[j], id: pick.1 });
        j = pick.0;
    }
    out.reverse();
    out
}
