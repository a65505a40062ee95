//! GloVe embeddings of subword tokens and tf-idf gloss vectors.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;
use crate::tensor::{dot, norm, Tensor};
use crate::tokenizer::{self, TokenizerModel};

/// Sparse co-occurrence counts, sorted by `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoocMatrix {
    pub entries: Vec<(u32, u32, f64)>,
    pub window: usize,
    pub symmetric: bool,
}

impl CoocMatrix {
    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.entries.binary_search_by(|e| (e.0, e.1).cmp(&(i, j))).map_or(0.0, |k| self.entries[k].2)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Each unordered pair `(p, q)` of positions with `0 < q - p <= window`
/// inside one sequence adds `1 / (q - p)` to `X(t_p, t_q)` and, for distinct
/// tokens, to `X(t_q, t_p)`.
pub fn build_cooc(sequences: &[Vec<usize>], window: usize) -> Result<CoocMatrix> {
    if window < 1 {
        return Err(Error::config("co-occurrence window must be at least 1"));
    }
    let mut map: HashMap<(u32, u32), f64> = HashMap::new();
    for seq in sequences {
        for p in 0..seq.len() {
            for q in p + 1..seq.len().min(p + window + 1) {
                let w = 1.0 / (q - p) as f64;
                let (a, b) = (seq[p] as u32, seq[q] as u32);
                *map.entry((a, b)).or_default() += w;
                if a != b {
                    *map.entry((b, a)).or_default() += w;
                }
            }
        }
    }
    let mut entries: Vec<(u32, u32, f64)> = map.into_iter().map(|((i, j), x)| (i, j, x)).collect();
    entries.sort_by_key(|e| (e.0, e.1));
    Ok(CoocMatrix { entries, window, symmetric: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GloveConfig {
    pub dim: usize,
    pub x_max: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub learning_rate: f32,
    pub window: usize,
    pub seed: u64,
    /// Worker threads; above 1 the updates race (Hogwild) and results are
    /// no longer reproducible.
    pub threads: usize,
}

impl Default for GloveConfig {
    fn default() -> Self {
        GloveConfig {
            dim: 256,
            x_max: 10.0,
            alpha: 0.75,
            iterations: 50,
            learning_rate: 0.05,
            window: 10,
            seed: 0,
            threads: 1,
        }
    }
}

/// Weighting function `f(x)`.
pub fn weight(x: f64, x_max: f64, alpha: f64) -> f64 {
    if x < x_max {
        (x / x_max).powf(alpha)
    } else {
        1.0
    }
}

/// Main and context parameters; row `i` holds `dim` weights then the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GloveModel {
    pub dim: usize,
    pub vocab: usize,
    pub main: Vec<f32>,
    pub context: Vec<f32>,
    pub x_max: f64,
    pub alpha: f64,
}

impl GloveModel {
    pub fn new(vocab: usize, dim: usize, x_max: f64, alpha: f64, rng: &mut RngStream) -> Self {
        let n = vocab * (dim + 1);
        let mut init = |_| ((rng.uniform() - 0.5) / dim as f64) as f32;
        let main = (0..n).map(&mut init).collect();
        let context = (0..n).map(&mut init).collect();
        GloveModel { dim, vocab, main, context, x_max, alpha }
    }

    /// Σ f(X_ij)(w_i·w̃_j + b_i + b̃_j − ln X_ij)².
    pub fn objective(&self, cooc: &CoocMatrix) -> f64 {
        let s = self.dim + 1;
        cooc.entries
            .iter()
            .map(|&(i, j, x)| {
                let (wi, wj) = (&self.main[i as usize * s..][..s], &self.context[j as usize * s..][..s]);
                let diff =
                    dot(&wi[..self.dim], &wj[..self.dim]) as f64 + wi[self.dim] as f64 + wj[self.dim] as f64 - x.ln();
                weight(x, self.x_max, self.alpha) * diff * diff
            })
            .sum()
    }

    /// Final embedding `w_i + w̃_i` as a `[vocab, dim]` tensor.
    pub fn embeddings(&self) -> Tensor {
        let s = self.dim + 1;
        let mut data = Vec::with_capacity(self.vocab * self.dim);
        for i in 0..self.vocab {
            for k in 0..self.dim {
                data.push(self.main[i * s + k] + self.context[i * s + k]);
            }
        }
        Tensor::new(vec![self.vocab, self.dim], data).expect("consistent shape")
    }

    pub fn is_finite(&self) -> bool {
        self.main.iter().chain(&self.context).all(|v| v.is_finite())
    }
}

trait Slots {
    fn get(&self, i: usize) -> f32;
    fn set(&self, i: usize, v: f32);
}

impl Slots for [Cell<f32>] {
    #[inline]
    fn get(&self, i: usize) -> f32 {
        self[i].get()
    }
    #[inline]
    fn set(&self, i: usize, v: f32) {
        self[i].set(v)
    }
}

impl Slots for [AtomicU32] {
    #[inline]
    fn get(&self, i: usize) -> f32 {
        f32::from_bits(self[i].load(Ordering::Relaxed))
    }
    #[inline]
    fn set(&self, i: usize, v: f32) {
        self[i].store(v.to_bits(), Ordering::Relaxed)
    }
}

struct Buffers<'a, S: ?Sized> {
    main: &'a S,
    context: &'a S,
    gmain: &'a S,
    gcontext: &'a S,
}

/// One AdaGrad step on a single entry, in the reference trainer's form
/// (the learning rate is folded into the gradient before squaring).
#[inline]
fn update<S: Slots + ?Sized>(b: &Buffers<'_, S>, dim: usize, i: usize, j: usize, x: f64, cfg: &GloveConfig) {
    let s = dim + 1;
    let (oi, oj) = (i * s, j * s);
    let mut d = 0.0f32;
    for k in 0..dim {
        d += b.main.get(oi + k) * b.context.get(oj + k);
    }
    let diff = d + b.main.get(oi + dim) + b.context.get(oj + dim) - x.ln() as f32;
    let fdiff = weight(x, cfg.x_max, cfg.alpha) as f32 * diff * cfg.learning_rate;
    for k in 0..dim {
        let (wi, wj) = (b.main.get(oi + k), b.context.get(oj + k));
        let (t1, t2) = (fdiff * wj, fdiff * wi);
        b.main.set(oi + k, wi - t1 / b.gmain.get(oi + k).sqrt());
        b.context.set(oj + k, wj - t2 / b.gcontext.get(oj + k).sqrt());
        b.gmain.set(oi + k, b.gmain.get(oi + k) + t1 * t1);
        b.gcontext.set(oj + k, b.gcontext.get(oj + k) + t2 * t2);
    }
    b.main.set(oi + dim, b.main.get(oi + dim) - fdiff / b.gmain.get(oi + dim).sqrt());
    b.context.set(oj + dim, b.context.get(oj + dim) - fdiff / b.gcontext.get(oj + dim).sqrt());
    b.gmain.set(oi + dim, b.gmain.get(oi + dim) + fdiff * fdiff);
    b.gcontext.set(oj + dim, b.gcontext.get(oj + dim) + fdiff * fdiff);
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GloveReport {
    /// Objective before training and after every epoch.
    pub objective: Vec<f64>,
}

/// Fits GloVe by AdaGrad over the entries of `cooc`, visited in one fixed
/// shuffled order every epoch.
pub fn train_glove(cooc: &CoocMatrix, vocab: usize, cfg: &GloveConfig) -> Result<(GloveModel, GloveReport)> {
    if cooc.is_empty() {
        return Err(Error::Empty("co-occurrence matrix"));
    }
    if cfg.dim == 0 || cfg.threads == 0 {
        return Err(Error::config("glove dim and threads must be positive"));
    }
    if let Some(e) = cooc.entries.iter().find(|e| e.0 as usize >= vocab || e.1 as usize >= vocab) {
        return Err(Error::config(format!("co-occurrence index {} exceeds vocabulary {vocab}", e.0.max(e.1))));
    }
    let root = RngStream::new(cfg.seed, 0);
    let mut model = GloveModel::new(vocab, cfg.dim, cfg.x_max, cfg.alpha, &mut root.split(1));
    let mut order: Vec<usize> = (0..cooc.len()).collect();
    root.split(2).shuffle(&mut order);
    let mut report = GloveReport { objective: vec![model.objective(cooc)] };
    let n = model.main.len();
    if cfg.threads == 1 {
        let mut gmain = vec![1.0f32; n];
        let mut gcontext = vec![1.0f32; n];
        for _ in 0..cfg.iterations {
            let b = Buffers {
                main: Cell::from_mut(model.main.as_mut_slice()).as_slice_of_cells(),
                context: Cell::from_mut(model.context.as_mut_slice()).as_slice_of_cells(),
                gmain: Cell::from_mut(gmain.as_mut_slice()).as_slice_of_cells(),
                gcontext: Cell::from_mut(gcontext.as_mut_slice()).as_slice_of_cells(),
            };
            for &k in &order {
                let (i, j, x) = cooc.entries[k];
                update(&b, cfg.dim, i as usize, j as usize, x, cfg);
            }
            report.objective.push(model.objective(cooc));
        }
    } else {
        let atomic = |v: &[f32]| v.iter().map(|x| AtomicU32::new(x.to_bits())).collect::<Vec<_>>();
        let (main, context) = (atomic(&model.main), atomic(&model.context));
        let (gmain, gcontext) = (atomic(&vec![1.0; n]), atomic(&vec![1.0; n]));
        let b = Buffers {
            main: main.as_slice(),
            context: context.as_slice(),
            gmain: gmain.as_slice(),
            gcontext: gcontext.as_slice(),
        };
        let chunk = order.len().div_ceil(cfg.threads);
        for _ in 0..cfg.iterations {
            std::thread::scope(|scope| {
                for part in order.chunks(chunk) {
                    let b = &b;
                    scope.spawn(move || {
                        for &k in part {
                            let (i, j, x) = cooc.entries[k];
                            update(b, cfg.dim, i as usize, j as usize, x, cfg);
                        }
                    });
                }
            });
            let read = |v: &[AtomicU32]| v.iter().map(|a| f32::from_bits(a.load(Ordering::Relaxed))).collect();
            model.main = read(&main);
            model.context = read(&context);
            report.objective.push(model.objective(cooc));
        }
    }
    if !model.is_finite() {
        return Err(Error::Numeric("glove parameters diverged".into()));
    }
    Ok((model, report))
}

/// Tokenizes every gloss, counts co-occurrences and fits the embeddings.
pub fn train_on_glosses<S: AsRef<str>>(
    glosses: &[S],
    tokenizer: &TokenizerModel,
    cfg: &GloveConfig,
) -> Result<(Tensor, GloveReport)> {
    let seqs: Vec<Vec<usize>> = glosses.iter().map(|g| tokenizer.encode(g.as_ref())).collect();
    let cooc = build_cooc(&seqs, cfg.window)?;
    let (model, report) = train_glove(&cooc, tokenizer.vocab_size(), cfg)?;
    Ok((model.embeddings(), report))
}

/// Text embedding file: one line per id, `piece v1 .. vd`.
pub fn save_embeddings(path: &Path, tokenizer: &TokenizerModel, table: &Tensor) -> Result<()> {
    if table.rows() != tokenizer.vocab_size() {
        return Err(Error::Shape {
            op: "save_embeddings",
            left: table.shape().to_vec(),
            right: vec![tokenizer.vocab_size()],
        });
    }
    let mut s = String::new();
    for id in 0..table.rows() {
        s.push_str(&tokenizer::escape(tokenizer.id_to_piece(id)));
        for v in table.row(id) {
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    io::write_atomic(path, s.as_bytes())
}

/// Reads an embedding file into a table aligned with `tokenizer`'s ids.
/// Pieces absent from the file keep zero rows.
pub fn load_embeddings(path: &Path, tokenizer: &TokenizerModel) -> Result<Tensor> {
    let text = io::read_to_string(path)?;
    let mut dim = None;
    let mut rows: Vec<(usize, Vec<f32>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split(' ');
        let piece = tokenizer::unescape(parts.next().unwrap_or_default())?;
        let values = parts
            .map(|v| v.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| Error::format("embedding file", format!("line {}: {e}", n + 1)))?;
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(Error::format("embedding file", format!("line {} has {} values", n + 1, values.len())));
        }
        let id = match piece.as_str() {
            "<pad>" => Some(tokenizer::PAD),
            "<s>" => Some(tokenizer::BOS),
            "</s>" => Some(tokenizer::EOS),
            "<unk>" => Some(tokenizer::UNK),
            p => tokenizer.piece_id(p),
        };
        if let Some(id) = id {
            rows.push((id, values));
        }
    }
    let dim = dim.ok_or(Error::Empty("embedding file"))?;
    let mut table = Tensor::zeros(&[tokenizer.vocab_size(), dim]);
    for (id, v) in rows {
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&v);
    }
    Ok(table)
}

/// Inverse document frequencies `ln(N / df)` over token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    pub n_docs: usize,
    pub idf: HashMap<usize, f64>,
}

impl IdfTable {
    pub fn build(sequences: &[Vec<usize>]) -> Self {
        let mut df: HashMap<usize, usize> = HashMap::new();
        for seq in sequences {
            let mut seen: Vec<usize> = seq.clone();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = sequences.len();
        let idf = df.into_iter().map(|(t, d)| (t, (n as f64 / d as f64).ln())).collect();
        IdfTable { n_docs: n, idf }
    }

    /// Tokens never seen in the corpus get weight zero.
    pub fn get(&self, token: usize) -> f64 {
        self.idf.get(&token).copied().unwrap_or(0.0)
    }
}

/// tf-idf weights of a gloss, `tf(t) · idf(t)`, keyed by token in order of
/// first appearance.
pub fn tfidf_weights(tokens: &[usize], idf: &IdfTable) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for &t in tokens {
        match out.iter_mut().find(|e| e.0 == t) {
            Some(e) => e.1 += 1.0,
            None => out.push((t, 1.0)),
        }
    }
    for e in &mut out {
        e.1 *= idf.get(e.0);
    }
    out
}

/// Unit-length tf-idf weighted average of token vectors (zero when every
/// weight is zero).
pub fn gloss_vector_tfidf(tokens: &[usize], table: &Tensor, idf: &IdfTable) -> Vec<f32> {
    let d = table.cols();
    let mut v = vec![0.0f64; d];
    for (t, w) in tfidf_weights(tokens, idf) {
        if w == 0.0 {
            continue;
        }
        for (acc, x) in v.iter_mut().zip(table.row(t)) {
            *acc += w * *x as f64;
        }
    }
    let out: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let n = norm(&out);
    if n == 0.0 {
        return out;
    }
    out.iter().map(|x| x / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cooc_examples() {
        let c = build_cooc(&[vec![0, 1, 0]], 2).unwrap();
        assert_eq!(c.get(0, 1), 2.0);
        assert_eq!(c.get(1, 0), 2.0);
        assert_eq!(c.get(0, 0), 0.5);
        assert!(build_cooc(&[vec![0], vec![1]], 10).unwrap().is_empty());
        assert_eq!(build_cooc(&[vec![0, 1]], 1).unwrap().get(0, 1), 1.0);
        assert!(build_cooc(&[vec![0, 1]], 0).is_err());
    }

    #[test]
    fn weighting_function() {
        assert_eq!(weight(10.0, 10.0, 0.75), 1.0);
        assert!((weight(5.0, 10.0, 0.75) - 0.5946).abs() < 1e-4);
    }
}
