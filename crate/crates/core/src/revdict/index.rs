//! Cosine lookup of predicted vectors against reference embeddings.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingKind, GlossRecord};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Anything that maps a definition to a vector.
pub trait VectorPredictor {
    fn predict_vector(&self, gloss: &str) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub kind: EmbeddingKind,
    ids: Vec<String>,
    labels: Vec<String>,
    /// Unit-norm rows.
    rows: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    /// The record's word when known, else its gloss.
    pub label: String,
    pub cosine: f64,
}

impl RetrievalIndex {
    pub fn build(records: &[GlossRecord], kind: EmbeddingKind) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("retrieval index"));
        }
        let mut seen = BTreeSet::new();
        let mut idx = RetrievalIndex { kind, ids: Vec::new(), labels: Vec::new(), rows: Vec::new() };
        for r in records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(&r.id, "duplicate id in retrieval index"));
            }
            let v =
                r.embeddings.get(kind).ok_or_else(|| Error::validation(&r.id, format!("missing {kind} embedding")))?;
            let n = norm(v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::validation(&r.id, format!("{kind} embedding cannot be normalised")));
            }
            idx.rows.push(v.iter().map(|x| x / n).collect());
            idx.ids.push(r.id.clone());
            idx.labels.push(r.word.clone().unwrap_or_else(|| r.gloss.clone()));
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i]
    }

    /// The `k` most cosine-similar rows, best first; equal scores are
    /// ordered by id.
    pub fn nearest(&self, vector: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if vector.len() != self.rows[0].len() {
            return Err(Error::Shape { op: "index query", left: vec![self.rows[0].len()], right: vec![vector.len()] });
        }
        let qn = norm(vector);
        let mut scored: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let c = if qn > 0.0 { (dot(r, vector) / qn) as f64 } else { 0.0 };
                (c, i)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(c, i)| Hit { id: self.ids[i].clone(), label: self.labels[i].clone(), cosine: c })
            .collect())
    }
}

/// Predicts a vector for `definition` and looks it up.
pub fn query(predictor: &dyn VectorPredictor, index: &RetrievalIndex, definition: &str, k: usize) -> Result<Vec<Hit>> {
    let v = predictor.predict_vector(definition)?;
    index.nearest(&v, k)
}
