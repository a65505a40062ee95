//! Scoring: regression metrics, cosine ranking, linear CKA, BLEU and the
//! Spearman train-similarity analysis.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde_json::{Map, Value};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn check_pair<V: AsRef<[f32]>>(op: &'static str, a: &[V], b: &[V]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape { op, left: vec![a.len()], right: vec![b.len()] });
    }
    for (x, y) in a.iter().zip(b) {
        if x.as_ref().len() != y.as_ref().len() {
            return Err(Error::Shape { op, left: vec![x.as_ref().len()], right: vec![y.as_ref().len()] });
        }
    }
    if a.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn cosine64(a: &[f32], b: &[f32]) -> Option<f64> {
    let (aa, bb) = (dot64(a, a), dot64(b, b));
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((dot64(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over samples of the per-dimension mean squared difference.
pub fn mse<V: AsRef<[f32]>>(pred: &[V], gt: &[V]) -> Result<f64> {
    check_pair("mse", pred, gt)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (p, g) = (p.as_ref(), g.as_ref());
            let s: f64 = p.iter().zip(g).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            s / p.len().max(1) as f64
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean cosine similarity; a zero-norm sample contributes 0.
pub fn cos<V: AsRef<[f32]>>(pred: &[V], gt: &[V]) -> Result<f64> {
    check_pair("cos", pred, gt)?;
    let mut total = 0.0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        match cosine64(p.as_ref(), g.as_ref()) {
            Some(c) => total += c,
            None => log::warn!("sample {i}: zero-norm vector, cosine taken as 0"),
        }
    }
    Ok(total / pred.len() as f64)
}

fn unit_rows<V: AsRef<[f32]>>(vs: &[V]) -> Vec<Vec<f64>> {
    vs.iter()
        .map(|v| {
            let v = v.as_ref();
            let n = dot64(v, v).sqrt();
            let n = if n == 0.0 { 1.0 } else { n };
            v.iter().map(|x| *x as f64 / n).collect()
        })
        .collect()
}

/// Cosine-based ranking: for each prediction, the fraction of ground truths
/// (out of N) strictly closer in cosine than its own; averaged. 0 is perfect.
pub fn rnk<V: AsRef<[f32]>>(preds: &[V], gts: &[V]) -> Result<f64> {
    check_pair("rnk", preds, gts)?;
    if let Some(i) = gts.iter().position(|g| g.as_ref().iter().all(|x| *x == 0.0)) {
        return Err(Error::validation(format!("ground truth {i}"), "zero vector in rnk"));
    }
    let (p, g) = (unit_rows(preds), unit_rows(gts));
    let n = p.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let own = dot(&p[i], &g[i]);
        let higher = (0..n).filter(|&j| j != i && dot(&p[i], &g[j]) > own).count();
        total += higher as f64 / n as f64;
    }
    Ok(total / n as f64)
}

fn to_matrix<V: AsRef<[f32]>>(rows: &[V]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    if rows.iter().any(|r| r.as_ref().len() != d) {
        return Err(Error::Shape { op: "cka", left: vec![n, d], right: vec![] });
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i].as_ref()[j] as f64))
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Linear CKA between two representations of the same `n` samples.
pub fn cka_linear<V: AsRef<[f32]>, W: AsRef<[f32]>>(x: &[V], y: &[W]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape { op: "cka_linear", left: vec![x.len()], right: vec![y.len()] });
    }
    if x.len() < 2 {
        return Err(Error::config("cka_linear needs at least two samples"));
    }
    let (mut xc, mut yc) = (to_matrix(x)?, to_matrix(y)?);
    center_columns(&mut xc);
    center_columns(&mut yc);
    let cross = (xc.transpose() * &yc).norm_squared();
    let den = (xc.transpose() * &xc).norm() * (yc.transpose() * &yc).norm();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((cross / den).clamp(0.0, 1.0))
}

/// Clipped n-gram matches and candidate n-gram total.
fn clipped(cand: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut refs: HashMap<&[&str], usize> = HashMap::new();
    for g in reference.windows(n) {
        *refs.entry(g).or_default() += 1;
    }
    let mut cands: HashMap<&[&str], usize> = HashMap::new();
    for g in cand.windows(n) {
        *cands.entry(g).or_default() += 1;
    }
    let matched = cands.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len() + 1 - n)
}

/// Sentence BLEU over whitespace tokens: unsmoothed unigram precision,
/// add-one smoothing for higher orders, brevity penalty
/// `exp(min(0, 1 - r/c))`.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refs: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() || refs.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(&cand, &refs, n);
        let p = if n == 1 { m as f64 / t as f64 } else { (m as f64 + 1.0) / (t as f64 + 1.0) };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = (1.0 - refs.len() as f64 / cand.len() as f64).min(0.0).exp();
    bp * (log_sum / max_n as f64).exp()
}

/// Best sentence BLEU against any of several references.
pub fn bleu_max(candidate: &str, references: &[&str], max_n: usize) -> f64 {
    references.iter().map(|r| bleu(candidate, r, max_n)).fold(0.0, f64::max)
}

/// Fractional ranks starting at 1; ties share their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let Some(i) = (0..n - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).expect("successor exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value: exact permutation test for n <= 10, otherwise the
    /// t approximation with n - 2 degrees of freedom.
    pub p_value: f64,
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman> {
    if xs.len() != ys.len() {
        return Err(Error::Shape { op: "spearman", left: vec![xs.len()], right: vec![ys.len()] });
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::config("spearman needs at least three pairs"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let rho = pearson(&rx, &ry);
    let p_value = if n <= 10 {
        let mut perm: Vec<usize> = (0..n).collect();
        let (mut hits, mut total) = (0u64, 0u64);
        let mut buf = vec![0.0; n];
        loop {
            for (b, &k) in buf.iter_mut().zip(&perm) {
                *b = ry[k];
            }
            if pearson(&rx, &buf).abs() >= rho.abs() - 1e-12 {
                hits += 1;
            }
            total += 1;
            if !next_permutation(&mut perm) {
                break;
            }
        }
        hits as f64 / total as f64
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Spearman { rho, p_value })
}

/// Mean of the `k` largest cosines between `test` and the train vectors.
pub fn train_similarity<V: AsRef<[f32]>>(test: &[f32], train: &[V], k: usize) -> Result<f64> {
    if train.is_empty() || k == 0 {
        return Err(Error::Empty("train_similarity"));
    }
    let mut cs: Vec<f64> = train.iter().map(|t| cosine64(test, t.as_ref()).unwrap_or(0.0)).collect();
    cs.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(cs.len());
    Ok(cs[..k].iter().sum::<f64>() / k as f64)
}

/// Scores keyed by (language, embedding type or "text", metric).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub entries: BTreeMap<(String, String, String), f64>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn insert(&mut self, language: &str, target: &str, metric: &str, value: f64) {
        self.entries.insert((language.into(), target.into(), metric.into()), value);
    }

    pub fn get(&self, language: &str, target: &str, metric: &str) -> Option<f64> {
        self.entries.get(&(language.into(), target.into(), metric.into())).copied()
    }

    /// Flat object: `"lang.target.metric": value` plus `"meta.key": value`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for ((l, t, k), v) in &self.entries {
            m.insert(format!("{l}.{t}.{k}"), Value::from(*v));
        }
        for (k, v) in &self.metadata {
            m.insert(format!("meta.{k}"), Value::from(v.clone()));
        }
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::format("metric report", "not a JSON object"))?;
        let mut r = MetricReport::default();
        for (key, val) in obj {
            if let Some(k) = key.strip_prefix("meta.") {
                let s = val.as_str().ok_or_else(|| Error::format("metric report", format!("{key} is not a string")))?;
                r.metadata.insert(k.into(), s.into());
                continue;
            }
            let parts: Vec<&str> = key.splitn(3, '.').collect();
            let (Some(x), [l, t, m]) = (val.as_f64(), parts.as_slice()) else {
                return Err(Error::format("metric report", format!("bad entry {key}")));
            };
            r.insert(l, t, m, x);
        }
        Ok(r)
    }

    /// Aligned table, one row per (language, target), one column per metric.
    pub fn to_table(&self) -> String {
        let mut metrics: Vec<&str> = self.entries.keys().map(|k| k.2.as_str()).collect();
        metrics.sort_unstable();
        metrics.dedup();
        let mut rows: Vec<(&str, &str)> = self.entries.keys().map(|k| (k.0.as_str(), k.1.as_str())).collect();
        rows.dedup();
        let mut s = format!("{:<6}{:<9}", "lang", "target");
        for m in &metrics {
            let _ = write!(s, "{m:>10}");
        }
        s.push('\n');
        for (l, t) in rows {
            let _ = write!(s, "{l:<6}{t:<9}");
            for m in &metrics {
                match self.get(l, t, m) {
                    Some(v) => {
                        let _ = write!(s, "{v:>10.4}");
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_and_cos_examples() {
        let a = vec![vec![0.0f32, 0.0]];
        let b = vec![vec![1.0f32, 1.0]];
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(mse(&b, &b).unwrap(), 0.0);
        assert_eq!(cos(&b, &b).unwrap(), 1.0);
        assert_eq!(cos(&[vec![1.0f32, 0.0]], &[vec![0.0f32, 1.0]]).unwrap(), 0.0);
        assert_eq!(cos(&[vec![1.0f32, 2.0]], &[vec![-1.0f32, -2.0]]).unwrap(), -1.0);
        assert_eq!(cos(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn rnk_hand_case() {
        let g = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let p = vec![vec![0.0f32, 1.0], vec![0.0, 1.0]];
        assert_eq!(rnk(&p, &g).unwrap(), 0.25);
        assert_eq!(rnk(&g, &g).unwrap(), 0.0);
        let empty: Vec<Vec<f32>> = Vec::new();
        assert!(rnk(&empty, &empty).is_err());
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("a b c d", "a b c d", 4), 1.0);
        assert_eq!(bleu("x y", "a b", 4), 0.0);
        let expected = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu("a b c d", "a b c e", 4) - expected).abs() < 1e-15);
        // brevity: candidate shorter than the reference
        let short = bleu("a b", "a b c d", 4);
        assert!((short - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[2.0, 3.0, 5.0, 9.0]).unwrap().rho - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap().rho + 1.0).abs() < 1e-12);
        let s = spearman(&xs, &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((s.rho - 0.6).abs() < 1e-12);
        // |rho| >= 0.6 for 10 of the 24 orderings of four ranks
        assert!((s.p_value - 10.0 / 24.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricReport::default();
        r.insert("en", "sgns", "MSE", 0.5);
        r.insert("en", "text", "BLEU", 0.1);
        r.metadata.insert("model".into(), "m1".into());
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_table().contains("0.5000"));
    }
}
