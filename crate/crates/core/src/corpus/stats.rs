use std::collections::HashSet;

use serde::Serialize;

use super::{EmbeddingKind, GlossRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlossSize {
    pub mean: f64,
    /// Population standard deviation.
    pub std_dev: f64,
    pub min: usize,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub dict_size: usize,
    pub n_tokens: usize,
    pub n_glosses: usize,
    pub gloss_size: GlossSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorStats {
    pub kind: EmbeddingKind,
    pub n_vectors: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub abs_min: f64,
    pub abs_mean: f64,
    pub abs_max: f64,
}

/// Quantile by linear interpolation between closest ranks of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn pairwise_sum_f64(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum_f64(&xs[..mid]) + pairwise_sum_f64(&xs[mid..])
}

/// Whitespace-token statistics of a set of glosses.
pub fn gloss_stats<S: AsRef<str>>(glosses: &[S]) -> Result<CorpusStats> {
    if glosses.is_empty() {
        return Err(Error::Empty("gloss_stats"));
    }
    let mut dict: HashSet<&str> = HashSet::new();
    let mut sizes: Vec<f64> = Vec::with_capacity(glosses.len());
    for g in glosses {
        let mut n = 0usize;
        for tok in g.as_ref().split_whitespace() {
            dict.insert(tok);
            n += 1;
        }
        sizes.push(n as f64);
    }
    let n_tokens = sizes.iter().map(|&s| s as usize).sum();
    let n = sizes.len() as f64;
    let mean = pairwise_sum_f64(&sizes) / n;
    let sq: Vec<f64> = sizes.iter().map(|s| (s - mean).powi(2)).collect();
    let std_dev = (pairwise_sum_f64(&sq) / n).sqrt();
    sizes.sort_by(f64::total_cmp);
    Ok(CorpusStats {
        dict_size: dict.len(),
        n_tokens,
        n_glosses: glosses.len(),
        gloss_size: GlossSize {
            mean,
            std_dev,
            min: sizes[0] as usize,
            q25: quantile(&sizes, 0.25),
            median: quantile(&sizes, 0.5),
            q75: quantile(&sizes, 0.75),
            max: sizes[sizes.len() - 1] as usize,
        },
    })
}

/// Element-wise statistics over every vector of one embedding type.
pub fn vector_stats(records: &[GlossRecord], kind: EmbeddingKind) -> Result<VectorStats> {
    let mut sums: Vec<f64> = Vec::new();
    let mut abs_sums: Vec<f64> = Vec::new();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut abs_min, mut abs_max) = (f64::INFINITY, 0.0f64);
    let mut count = 0usize;
    let mut n_vectors = 0;
    for r in records {
        let Some(v) = r.embeddings.get(kind) else { continue };
        n_vectors += 1;
        let mut s = 0.0;
        let mut a = 0.0;
        for &x in v {
            let x = x as f64;
            s += x;
            a += x.abs();
            min = min.min(x);
            max = max.max(x);
            abs_min = abs_min.min(x.abs());
            abs_max = abs_max.max(x.abs());
        }
        count += v.len();
        sums.push(s);
        abs_sums.push(a);
    }
    if n_vectors == 0 {
        return Err(Error::Empty("vector_stats: no record has this embedding type"));
    }
    Ok(VectorStats {
        kind,
        n_vectors,
        min,
        mean: pairwise_sum_f64(&sums) / count as f64,
        max,
        abs_min,
        abs_mean: pairwise_sum_f64(&abs_sums) / count as f64,
        abs_max,
    })
}
