//! Reverse dictionary: a transformer encoder over gloss tokens whose pooled
//! output is regressed onto word embeddings.

mod index;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingKind, Language, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::io::{read_to_string, to_json_bytes, write_atomic};
use crate::rng::RngStream;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{TokenizerModel, BOS, EOS, PAD};

pub use index::{query, Hit, RetrievalIndex, VectorPredictor};
pub use train::{
    batch_gradients, evaluate, prepare_examples, train, Evaluation, RevdictEpoch, RevdictExample, RevdictReport,
    RevdictTrainConfig, Scheduler,
};

pub const DESCRIPTOR_FILE: &str = "descriptor.json";
const FORMAT: &str = "glosslab-revdict";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Average,
    /// Output at the final eos position.
    Eos,
}

/// Where the rectifier sits in a regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReluPlacement {
    /// `W · relu(a) + b`
    Pre,
    /// `relu(W · a + b)`
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevdictConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub aggregation: Aggregation,
    /// Embedding types predicted during training, one head each.
    pub targets: Vec<EmbeddingKind>,
    /// The head whose output is reported.
    pub primary: EmbeddingKind,
    /// Gloss tokens kept, not counting bos and eos.
    pub max_len: usize,
    pub relu: ReluPlacement,
    pub positional: bool,
}

impl RevdictConfig {
    pub fn new(vocab_size: usize, target: EmbeddingKind) -> Self {
        RevdictConfig {
            vocab_size,
            d_model: 256,
            layers: 2,
            heads: 2,
            ff_dim: 1024,
            dropout: 0.1,
            aggregation: Aggregation::Average,
            targets: vec![target],
            primary: target,
            max_len: 255,
            relu: ReluPlacement::Pre,
            positional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.ff_dim == 0 {
            return Err(Error::config("layers, heads, d_model and ff_dim must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return Err(Error::config("vocabulary has no pieces besides the specials"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("at least one regression head is required"));
        }
        if !self.targets.contains(&self.primary) {
            return Err(Error::config(format!("primary head {} is not among the targets", self.primary)));
        }
        for (i, k) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(k) {
                return Err(Error::config(format!("target {k} listed twice")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(())
    }
}

/// One row of the submitted-systems table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RevdictPreset {
    pub name: &'static str,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hyperparameter-search budget.
    pub search_points: usize,
    pub scheduler: SchedulerKind,
    pub multitask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Cosine,
    Plateau,
}

pub const PRESETS: [RevdictPreset; 6] = {
    const fn p(name: &'static str, bs: usize, me: usize, hp: usize, s: SchedulerKind, mt: bool) -> RevdictPreset {
        RevdictPreset { name, batch_size: bs, max_epochs: me, search_points: hp, scheduler: s, multitask: mt }
    }
    use SchedulerKind::{Cosine as CS, Plateau as PS};
    [
        p("v1", 1024, 20, 30, CS, false),
        p("v2", 2048, 20, 30, CS, false),
        p("v3", 4096, 20, 30, CS, false),
        p("v4", 8192, 20, 30, CS, false),
        p("v5", 2048, 150, 10, PS, false),
        p("v6", 2048, 150, 10, PS, true),
    ]
};

impl RevdictPreset {
    pub fn by_name(name: &str) -> Result<RevdictPreset> {
        PRESETS
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| Error::config(format!("unknown revdict preset {name:?} (expected v1..v6)")))
    }

    /// Model configuration for predicting `target` in `language`.
    pub fn model_config(&self, vocab_size: usize, language: Language, target: EmbeddingKind) -> RevdictConfig {
        let mut c = RevdictConfig::new(vocab_size, target);
        if self.multitask {
            c.targets = language.embedding_kinds().to_vec();
        }
        c
    }

    pub fn train_config(&self) -> RevdictTrainConfig {
        RevdictTrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            scheduler: match self.scheduler {
                SchedulerKind::Cosine => Scheduler::Cosine { warmup_fraction: 0.1 },
                SchedulerKind::Plateau => Scheduler::Plateau { factor: 0.1, patience: 5 },
            },
            ..RevdictTrainConfig::default()
        }
    }
}

/// `[T, d]` sinusoidal position table.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; len * d];
    for pos in 0..len {
        for i in 0..d.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin() as f32;
            if 2 * i + 1 < d {
                data[pos * d + 2 * i + 1] = angle.cos() as f32;
            }
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}

/// `bos`, the lowercased gloss's pieces (at most `max_len`), `eos`.
pub fn tokenize_gloss(tokenizer: &TokenizerModel, gloss: &str, max_len: usize) -> Vec<usize> {
    let mut ids = tokenizer.encode(&gloss.to_lowercase());
    if ids.len() > max_len {
        log::warn!("gloss truncated from {} to {max_len} tokens", ids.len());
        ids.truncate(max_len);
    }
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(BOS);
    out.extend(ids);
    out.push(EOS);
    out
}

/// Per-row pooling weights `[B, T]` for sequences of the given lengths.
pub fn aggregation_weights(lengths: &[usize], t: usize, agg: Aggregation) -> Result<Tensor> {
    let mut w = vec![0.0f32; lengths.len() * t];
    for (b, &n) in lengths.iter().enumerate() {
        if n == 0 || n > t {
            return Err(Error::Empty("token sequence"));
        }
        let row = &mut w[b * t..(b + 1) * t];
        match agg {
            Aggregation::Sum => row[..n].fill(1.0),
            Aggregation::Average => row[..n].fill(1.0 / n as f32),
            Aggregation::Eos => row[n - 1] = 1.0,
        }
    }
    Tensor::new(vec![lengths.len(), t], w)
}

/// Pools `x` (`B·T` rows) with [`aggregation_weights`].
pub fn aggregate(x: &Tensor, lengths: &[usize], agg: Aggregation) -> Result<Tensor> {
    let t = x.rows() / lengths.len().max(1);
    let w = aggregation_weights(lengths, t, agg)?;
    let mut tape = Tape::new(false);
    let v = tape.constant(x.clone());
    let out = tape.weighted_rows(v, w)?;
    Ok(tape.value(out).clone())
}

/// Length without trailing padding.
fn effective_len(tokens: &[usize]) -> usize {
    tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1)
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    embed: ParamId,
    layers: Vec<LayerIds>,
    heads: Vec<(EmbeddingKind, ParamId, ParamId)>,
}

impl Ids {
    fn resolve(s: &ParamStore, c: &RevdictConfig) -> Result<Ids> {
        let get = |name: String| {
            s.id(&name).ok_or_else(|| Error::format("revdict checkpoint", format!("missing parameter {name}")))
        };
        let layers = (0..c.layers)
            .map(|l| {
                let n = |x: &str| get(format!("layer{l}.{x}"));
                Ok(LayerIds {
                    wq: n("wq")?,
                    bq: n("bq")?,
                    wk: n("wk")?,
                    bk: n("bk")?,
                    wv: n("wv")?,
                    bv: n("bv")?,
                    wo: n("wo")?,
                    bo: n("bo")?,
                    ln1_g: n("ln1.g")?,
                    ln1_b: n("ln1.b")?,
                    ff1_w: n("ff1.w")?,
                    ff1_b: n("ff1.b")?,
                    ff2_w: n("ff2.w")?,
                    ff2_b: n("ff2.b")?,
                    ln2_g: n("ln2.g")?,
                    ln2_b: n("ln2.b")?,
                })
            })
            .collect::<Result<_>>()?;
        let heads = c
            .targets
            .iter()
            .map(|&k| Ok((k, get(format!("head.{k}.w"))?, get(format!("head.{k}.b"))?)))
            .collect::<Result<_>>()?;
        Ok(Ids { embed: get("embed".into())?, layers, heads })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    format: String,
    version: u32,
    config: RevdictConfig,
    vocab_fingerprint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RevdictModel {
    config: RevdictConfig,
    params: ParamStore,
    ids: Ids,
    vocab_fingerprint: Option<String>,
}

/// Handles to one forward pass.
pub(crate) struct Forward {
    pub pooled: Var,
    pub outputs: Vec<(EmbeddingKind, Var)>,
}

impl RevdictModel {
    pub fn new(config: RevdictConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ff_dim);
        let mut s = ParamStore::new();
        s.add("embed", Tensor::normal(&[config.vocab_size, d], 1.0, rng));
        for l in 0..config.layers {
            let mut add = |name: &str, t: Tensor| s.add(&format!("layer{l}.{name}"), t);
            for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                add(w, Tensor::xavier(d, d, rng));
                add(b, Tensor::zeros(&[d]));
            }
            add("ln1.g", Tensor::full(&[d], 1.0));
            add("ln1.b", Tensor::zeros(&[d]));
            add("ff1.w", Tensor::xavier(d, f, rng));
            add("ff1.b", Tensor::zeros(&[f]));
            add("ff2.w", Tensor::xavier(f, d, rng));
            add("ff2.b", Tensor::zeros(&[d]));
            add("ln2.g", Tensor::full(&[d], 1.0));
            add("ln2.b", Tensor::zeros(&[d]));
        }
        for k in &config.targets {
            s.add(&format!("head.{k}.w"), Tensor::xavier(d, EMBEDDING_DIM, rng));
            s.add(&format!("head.{k}.b"), Tensor::zeros(&[EMBEDDING_DIM]));
        }
        let ids = Ids::resolve(&s, &config)?;
        Ok(RevdictModel { config, params: s, ids, vocab_fingerprint: None })
    }

    pub fn config(&self) -> &RevdictConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_vocab_fingerprint(&mut self, fingerprint: impl Into<String>) {
        self.vocab_fingerprint = Some(fingerprint.into());
    }

    pub fn set_embeddings(&mut self, table: &Tensor) -> Result<()> {
        let cur = self.params.value(self.ids.embed).shape().to_vec();
        if table.shape() != cur.as_slice() {
            return Err(Error::Shape { op: "set_embeddings", left: cur, right: table.shape().to_vec() });
        }
        *self.params.value_mut(self.ids.embed) = table.clone();
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(dir)?;
        let d = Descriptor {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        };
        write_atomic(&dir.join(DESCRIPTOR_FILE), &to_json_bytes(&d)?)
    }

    pub fn load(dir: &Path, tokenizer: Option<&TokenizerModel>) -> Result<Self> {
        let text = read_to_string(&dir.join(DESCRIPTOR_FILE))?;
        let d: Descriptor =
            serde_json::from_str(&text).map_err(|e| Error::format("revdict descriptor", e.to_string()))?;
        if d.format != FORMAT || d.version != VERSION {
            return Err(Error::format("revdict descriptor", format!("unsupported format {} v{}", d.format, d.version)));
        }
        if let (Some(tok), Some(fp)) = (tokenizer, &d.vocab_fingerprint) {
            if tok.fingerprint() != *fp {
                return Err(Error::format("revdict checkpoint", "tokenizer does not match the one used in training"));
            }
        }
        let mut m = RevdictModel::new(d.config, &mut RngStream::new(0, 0))?;
        let stored = ParamStore::load(dir)?;
        if stored.len() != m.params.len() {
            return Err(Error::format(
                "revdict checkpoint",
                format!("{} tensors stored, architecture needs {}", stored.len(), m.params.len()),
            ));
        }
        m.params.copy_from(&stored)?;
        m.vocab_fingerprint = d.vocab_fingerprint;
        Ok(m)
    }

    fn layer(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        ids: &LayerIds,
        mask: &Tensor,
        b: usize,
        t: usize,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let (d, h) = (self.config.d_model, self.config.heads);
        let dh = d / h;
        let p = self.config.dropout;
        let proj = |tape: &mut Tape<'_>, w: ParamId, bias: ParamId| -> Result<Var> {
            let (w, bias) = (tape.param(w), tape.param(bias));
            let y = tape.linear(x, w, Some(bias))?;
            // [B·T, d] → [B, T, H, dh] → [B, H, T, dh] → [B·H, T, dh]
            let y = tape.reshape(y, &[b, t, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * h, t, dh])
        };
        let q = proj(tape, ids.wq, ids.bq)?;
        let k = proj(tape, ids.wk, ids.bk)?;
        let v = proj(tape, ids.wv, ids.bv)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
        let m = tape.constant(mask.clone());
        let scores = tape.add(scores, m)?;
        let attn = tape.softmax(scores);
        let attn = tape.dropout(attn, p, rng);
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t, d])?;
        let (wo, bo) = (tape.param(ids.wo), tape.param(ids.bo));
        let a = tape.linear(ctx, wo, Some(bo))?;
        let a = tape.dropout(a, p, rng);
        let x = tape.add(x, a)?;
        let (g1, b1) = (tape.param(ids.ln1_g), tape.param(ids.ln1_b));
        let x = tape.layer_norm(x, g1, b1, 1e-5)?;

        let (w1, c1) = (tape.param(ids.ff1_w), tape.param(ids.ff1_b));
        let f = tape.linear(x, w1, Some(c1))?;
        let f = tape.relu(f);
        let f = tape.dropout(f, p, rng);
        let (w2, c2) = (tape.param(ids.ff2_w), tape.param(ids.ff2_b));
        let f = tape.linear(f, w2, Some(c2))?;
        let f = tape.dropout(f, p, rng);
        let x = tape.add(x, f)?;
        let (g2, b2) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
        tape.layer_norm(x, g2, b2, 1e-5)
    }

    /// Forward pass over a batch of token sequences; trailing pads are
    /// ignored.
    pub(crate) fn forward(&self, tape: &mut Tape<'_>, batch: &[&[usize]], rng: &mut RngStream) -> Result<Forward> {
        let d = self.config.d_model;
        let lengths: Vec<usize> = batch.iter().map(|s| effective_len(s)).collect();
        if lengths.contains(&0) {
            return Err(Error::Empty("token sequence"));
        }
        let b = batch.len();
        let t = *lengths.iter().max().ok_or(Error::Empty("revdict batch"))?;
        let mut ids = Vec::with_capacity(b * t);
        for (s, &n) in batch.iter().zip(&lengths) {
            ids.extend_from_slice(&s[..n]);
            ids.extend(std::iter::repeat_n(PAD, t - n));
        }
        let table = tape.param(self.ids.embed);
        let mut x = tape.embedding(table, &ids)?;
        if self.config.positional {
            let pe = sinusoidal_positions(t, d);
            let mut rows = Vec::with_capacity(b * t * d);
            for _ in 0..b {
                rows.extend_from_slice(pe.data());
            }
            let pe = tape.constant(Tensor::new(vec![b * t, d], rows)?);
            x = tape.add(x, pe)?;
        }
        x = tape.dropout(x, self.config.dropout, rng);

        // Additive key mask, identical for every head and query.
        let h = self.config.heads;
        let mut mask = vec![0.0f32; b * h * t * t];
        for (bi, &n) in lengths.iter().enumerate() {
            for hi in 0..h {
                let base = (bi * h + hi) * t * t;
                for q in 0..t {
                    mask[base + q * t + n..base + (q + 1) * t].fill(f32::NEG_INFINITY);
                }
            }
        }
        let mask = Tensor::new(vec![b * h, t, t], mask)?;
        for l in 0..self.config.layers {
            let lid = self.ids.layers[l];
            x = self.layer(tape, x, &lid, &mask, b, t, rng)?;
        }
        let w = aggregation_weights(&lengths, t, self.config.aggregation)?;
        let pooled = tape.weighted_rows(x, w)?;
        let mut outputs = Vec::with_capacity(self.ids.heads.len());
        for &(kind, wid, bid) in &self.ids.heads {
            let (w, bias) = (tape.param(wid), tape.param(bid));
            let y = match self.config.relu {
                ReluPlacement::Pre => {
                    let r = tape.relu(pooled);
                    tape.linear(r, w, Some(bias))?
                }
                ReluPlacement::Post => {
                    let y = tape.linear(pooled, w, Some(bias))?;
                    tape.relu(y)
                }
            };
            outputs.push((kind, y));
        }
        Ok(Forward { pooled, outputs })
    }

    /// Pooled encoder output `[B, d]` in eval mode.
    pub fn encode_batch(&self, batch: &[&[usize]]) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params, false);
        let f = self.forward(&mut tape, batch, &mut RngStream::new(0, 0))?;
        Ok(tape.value(f.pooled).clone())
    }

    pub fn encode_gloss(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        Ok(self.encode_batch(&[tokens])?.into_data())
    }

    /// Every head's prediction for each sequence, in eval mode.
    pub fn predict_batch(&self, batch: &[&[usize]]) -> Result<BTreeMap<EmbeddingKind, Tensor>> {
        let mut tape = Tape::with_params(&self.params, false);
        let f = self.forward(&mut tape, batch, &mut RngStream::new(0, 0))?;
        Ok(f.outputs.iter().map(|&(k, v)| (k, tape.value(v).clone())).collect())
    }

    /// Primary-head predictions, computed in chunks of `chunk` sequences.
    pub fn predict_primary(&self, batch: &[Vec<usize>], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(chunk.max(1)) {
            let refs: Vec<&[usize]> = part.iter().map(Vec::as_slice).collect();
            let mut preds = self.predict_batch(&refs)?;
            let t = preds.remove(&self.config.primary).ok_or(Error::Empty("primary head"))?;
            out.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
        }
        Ok(out)
    }
}

/// A model plus tokenizer, answering free-text queries.
pub struct GlossEncoder<'a> {
    pub model: &'a RevdictModel,
    pub tokenizer: &'a TokenizerModel,
}

impl GlossEncoder<'_> {
    pub fn predict(&self, gloss: &str) -> Result<BTreeMap<EmbeddingKind, Vec<f32>>> {
        let ids = tokenize_gloss(self.tokenizer, gloss, self.model.config.max_len);
        Ok(self.model.predict_batch(&[&ids])?.into_iter().map(|(k, t)| (k, t.into_data())).collect())
    }
}

impl VectorPredictor for GlossEncoder<'_> {
    fn predict_vector(&self, gloss: &str) -> Result<Vec<f32>> {
        let mut m = self.predict(gloss)?;
        m.remove(&self.model.config.primary).ok_or(Error::Empty("primary head"))
    }
}

/// Writes `[{id, <kind>: [...]}, ...]`.
pub fn save_predictions(path: &Path, kind: EmbeddingKind, ids: &[String], vectors: &[Vec<f32>]) -> Result<()> {
    if ids.len() != vectors.len() {
        return Err(Error::Shape { op: "save_predictions", left: vec![ids.len()], right: vec![vectors.len()] });
    }
    let rows: Vec<serde_json::Value> = ids
        .iter()
        .zip(vectors)
        .map(|(id, v)| {
            let mut m = serde_json::Map::new();
            m.insert("id".into(), serde_json::Value::String(id.clone()));
            m.insert(kind.name().into(), serde_json::json!(v));
            serde_json::Value::Object(m)
        })
        .collect();
    write_atomic(path, &to_json_bytes(&rows)?)
}
