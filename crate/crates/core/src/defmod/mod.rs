//! Definition modeling: an RNN generator conditioned on word embeddings.
//!
//! The seed vector initialises the recurrent state; the context vector is
//! fed at every step, together with the RNN output, into a GRU-like gated
//! cell whose output is projected onto the vocabulary.

mod beam;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingKind, Embeddings, Language, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::io::{read_to_string, to_json_bytes, write_atomic};
use crate::rng::RngStream;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::TokenizerModel;

pub use beam::{beam_search, exhaustive_search, greedy_decode, GlossSequence, StepModel};
pub use train::{
    evaluate_loss, prepare_examples, train, EarlyStopping, EpochReport, Example, TrainConfig, TrainReport,
};

pub const DESCRIPTOR_FILE: &str = "descriptor.json";
const FORMAT: &str = "glosslab-defmod";
const VERSION: u32 = 1;

/// How a seed or context vector is formed from a gloss's embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorSource {
    Single {
        embedding: EmbeddingKind,
    },
    Concat {
        embeddings: Vec<EmbeddingKind>,
    },
    /// Concatenation followed by one tanh layer.
    Mlp {
        embeddings: Vec<EmbeddingKind>,
        hidden: usize,
    },
}

impl VectorSource {
    /// Concatenation of every embedding type the language provides.
    pub fn allvec(language: Language) -> Self {
        VectorSource::Concat { embeddings: language.embedding_kinds().to_vec() }
    }

    pub fn kinds(&self) -> &[EmbeddingKind] {
        match self {
            VectorSource::Single { embedding } => std::slice::from_ref(embedding),
            VectorSource::Concat { embeddings } | VectorSource::Mlp { embeddings, .. } => embeddings,
        }
    }

    /// Width of the raw concatenated input.
    pub fn input_dim(&self) -> usize {
        self.kinds().len() * EMBEDDING_DIM
    }

    /// Width of the vector handed to the network.
    pub fn output_dim(&self) -> usize {
        match self {
            VectorSource::Mlp { hidden, .. } => *hidden,
            _ => self.input_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kinds = self.kinds();
        if kinds.is_empty() {
            return Err(Error::config("vector source lists no embedding types"));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::config(format!("embedding type {k} listed twice")));
            }
        }
        if let VectorSource::Mlp { hidden: 0, .. } = self {
            return Err(Error::config("mlp hidden size must be positive"));
        }
        Ok(())
    }

    /// Raw input vector for one record.
    pub fn gather(&self, id: &str, embeddings: &Embeddings) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.input_dim());
        for &k in self.kinds() {
            let v = embeddings.get(k).ok_or_else(|| Error::validation(id, format!("missing {k} embedding")))?;
            if v.len() != EMBEDDING_DIM {
                return Err(Error::validation(id, format!("{k} has {} values, expected {EMBEDDING_DIM}", v.len())));
            }
            out.extend_from_slice(v);
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        match self {
            VectorSource::Single { embedding } => embedding.to_string(),
            VectorSource::Concat { embeddings } => join_kinds(embeddings, "+"),
            VectorSource::Mlp { embeddings, hidden } => format!("mlp{hidden}({})", join_kinds(embeddings, "+")),
        }
    }
}

fn join_kinds(kinds: &[EmbeddingKind], sep: &str) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(sep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedContextSpec {
    pub seed: VectorSource,
    pub context: VectorSource,
}

impl SeedContextSpec {
    pub fn validate(&self) -> Result<()> {
        self.seed.validate()?;
        self.context.validate()
    }

    /// Fails if a referenced embedding type is not shipped for `language`.
    pub fn check_language(&self, language: Language) -> Result<()> {
        let avail = language.embedding_kinds();
        for k in self.seed.kinds().iter().chain(self.context.kinds()) {
            if !avail.contains(k) {
                return Err(Error::config(format!("{language} data has no {k} embeddings")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RnnKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefmodConfig {
    pub spec: SeedContextSpec,
    pub rnn: RnnKind,
    pub hidden: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub dropout_input: f32,
    pub dropout_network: f32,
    pub max_len: usize,
}

impl DefmodConfig {
    pub fn new(spec: SeedContextSpec, vocab_size: usize) -> Self {
        DefmodConfig {
            spec,
            rnn: RnnKind::Gru,
            hidden: 512,
            embed_dim: EMBEDDING_DIM,
            vocab_size,
            dropout_input: 0.1,
            dropout_network: 0.3,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::config("hidden and embedding sizes must be positive"));
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS {
            return Err(Error::config("vocabulary has no pieces besides the specials"));
        }
        for (name, r) in [("dropout_input", self.dropout_input), ("dropout_network", self.dropout_network)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(())
    }
}

/// Named configurations of the submitted systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    V3,
    V4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetSpec {
    pub main: SeedContextSpec,
    pub main_rnn: RnnKind,
    pub fallback: SeedContextSpec,
    pub fallback_rnn: RnnKind,
    pub epochs: usize,
}

impl Preset {
    pub fn spec(self, language: Language) -> PresetSpec {
        let sgns = VectorSource::Single { embedding: EmbeddingKind::Sgns };
        PresetSpec {
            main: SeedContextSpec { seed: sgns.clone(), context: VectorSource::allvec(language) },
            main_rnn: RnnKind::Gru,
            fallback: SeedContextSpec { seed: sgns.clone(), context: sgns },
            fallback_rnn: RnnKind::Gru,
            epochs: match self {
                Preset::V3 => 300,
                Preset::V4 => 450,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v3" => Ok(Preset::V3),
            "v4" => Ok(Preset::V4),
            _ => Err(Error::config(format!("unknown defmod preset {s:?} (expected v3 or v4)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    embed: ParamId,
    seed_mlp: Option<MlpIds>,
    ctx_mlp: Option<MlpIds>,
    seed_w: ParamId,
    seed_b: ParamId,
    rnn_wx: ParamId,
    rnn_wh: ParamId,
    rnn_bx: ParamId,
    rnn_bh: ParamId,
    gate_wz: ParamId,
    gate_bz: ParamId,
    gate_wr: ParamId,
    gate_br: ParamId,
    gate_wh: ParamId,
    gate_bh: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Ids {
    fn resolve(store: &ParamStore, config: &DefmodConfig) -> Result<Ids> {
        let get = |name: &str| {
            store.id(name).ok_or_else(|| Error::format("defmod checkpoint", format!("missing parameter {name}")))
        };
        let mlp = |src: &VectorSource, prefix: &str| -> Result<Option<MlpIds>> {
            Ok(match src {
                VectorSource::Mlp { .. } => {
                    Some(MlpIds { w: get(&format!("{prefix}.w"))?, b: get(&format!("{prefix}.b"))? })
                }
                _ => None,
            })
        };
        Ok(Ids {
            embed: get("embed")?,
            seed_mlp: mlp(&config.spec.seed, "seed_mlp")?,
            ctx_mlp: mlp(&config.spec.context, "ctx_mlp")?,
            seed_w: get("seed.w")?,
            seed_b: get("seed.b")?,
            rnn_wx: get("rnn.wx")?,
            rnn_wh: get("rnn.wh")?,
            rnn_bx: get("rnn.bx")?,
            rnn_bh: get("rnn.bh")?,
            gate_wz: get("gate.wz")?,
            gate_bz: get("gate.bz")?,
            gate_wr: get("gate.wr")?,
            gate_br: get("gate.br")?,
            gate_wh: get("gate.wh")?,
            gate_bh: get("gate.bh")?,
            out_w: get("out.w")?,
            out_b: get("out.b")?,
        })
    }
}

/// Recurrent state for a batch of rows: `h` is `[B, H]`; `c` is the LSTM
/// cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

/// Intermediate values of one step for a batch, all `[B, ·]`.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub log_probs: Tensor,
    /// RNN output `h_t`.
    pub rnn_out: Tensor,
    pub gate: Tensor,
    pub candidate: Tensor,
    pub output: Tensor,
    pub state: State,
}

#[derive(Clone, Copy)]
struct StateVars {
    h: Var,
    c: Option<Var>,
}

struct StepVars {
    logits: Var,
    rnn_out: Var,
    gate: Var,
    candidate: Var,
    output: Var,
    state: StateVars,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    format: String,
    version: u32,
    config: DefmodConfig,
    vocab_fingerprint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DefmodModel {
    config: DefmodConfig,
    params: ParamStore,
    ids: Ids,
    vocab_fingerprint: Option<String>,
}

impl DefmodModel {
    /// Randomly initialised model.
    pub fn new(config: DefmodConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, e, v) = (c.hidden, c.embed_dim, c.vocab_size);
        let gates = match c.rnn {
            RnnKind::Gru => 3 * h,
            RnnKind::Lstm => 4 * h,
        };
        let mut s = ParamStore::new();
        let embed = s.add("embed", Tensor::normal(&[v, e], 1.0, rng));
        let mlp = |s: &mut ParamStore, src: &VectorSource, prefix: &str, rng: &mut RngStream| {
            if let VectorSource::Mlp { hidden, .. } = src {
                s.add(&format!("{prefix}.w"), Tensor::xavier(src.input_dim(), *hidden, rng));
                s.add(&format!("{prefix}.b"), Tensor::zeros(&[*hidden]));
            }
        };
        mlp(&mut s, &c.spec.seed, "seed_mlp", rng);
        mlp(&mut s, &c.spec.context, "ctx_mlp", rng);
        let (sd, cd) = (c.spec.seed.output_dim(), c.spec.context.output_dim());
        s.add("seed.w", Tensor::xavier(sd, h, rng));
        s.add("seed.b", Tensor::zeros(&[h]));
        let k = 1.0 / (h as f32).sqrt();
        s.add("rnn.wx", Tensor::uniform(&[e, gates], k, rng));
        s.add("rnn.wh", Tensor::uniform(&[h, gates], k, rng));
        s.add("rnn.bx", Tensor::uniform(&[gates], k, rng));
        s.add("rnn.bh", Tensor::uniform(&[gates], k, rng));
        s.add("gate.wz", Tensor::xavier(cd + h, h, rng));
        s.add("gate.bz", Tensor::zeros(&[h]));
        s.add("gate.wr", Tensor::xavier(cd + h, cd, rng));
        s.add("gate.br", Tensor::zeros(&[cd]));
        s.add("gate.wh", Tensor::xavier(cd + h, h, rng));
        s.add("gate.bh", Tensor::zeros(&[h]));
        s.add("out.w", Tensor::uniform(&[h, v], k, rng));
        s.add("out.b", Tensor::zeros(&[v]));
        let ids = Ids::resolve(&s, &config)?;
        debug_assert_eq!(ids.embed, embed);
        Ok(DefmodModel { config, params: s, ids, vocab_fingerprint: None })
    }

    pub fn config(&self) -> &DefmodConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ties the checkpoint to a tokenizer; checked again on load.
    pub fn set_vocab_fingerprint(&mut self, fingerprint: impl Into<String>) {
        self.vocab_fingerprint = Some(fingerprint.into());
    }

    /// Replaces the token embedding table, e.g. with GloVe vectors.
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
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        };
        write_atomic(&dir.join(DESCRIPTOR_FILE), &to_json_bytes(&d)?)
    }

    /// Loads a checkpoint; with a tokenizer, also checks that it is the one
    /// the model was trained with.
    pub fn load(dir: &Path, tokenizer: Option<&TokenizerModel>) -> Result<Self> {
        let text = read_to_string(&dir.join(DESCRIPTOR_FILE))?;
        let d: Descriptor =
            serde_json::from_str(&text).map_err(|e| Error::format("defmod descriptor", e.to_string()))?;
        if d.format != FORMAT || d.version != VERSION {
            return Err(Error::format("defmod descriptor", format!("unsupported format {} v{}", d.format, d.version)));
        }
        d.config.validate()?;
        if let (Some(tok), Some(fp)) = (tokenizer, &d.vocab_fingerprint) {
            if tok.fingerprint() != *fp {
                return Err(Error::format("defmod checkpoint", "tokenizer does not match the one used in training"));
            }
        }
        let mut reference = DefmodModel::new(d.config.clone(), &mut RngStream::new(0, 0))?;
        let stored = ParamStore::load(dir)?;
        if stored.len() != reference.params.len() {
            return Err(Error::format(
                "defmod checkpoint",
                format!("{} tensors stored, architecture needs {}", stored.len(), reference.params.len()),
            ));
        }
        reference.params.copy_from(&stored)?;
        reference.vocab_fingerprint = d.vocab_fingerprint;
        Ok(reference)
    }

    fn source(&self, tape: &mut Tape<'_>, x: Tensor, mlp: Option<MlpIds>, rng: &mut RngStream) -> Result<Var> {
        let x = tape.constant(x);
        let x = tape.dropout(x, self.config.dropout_input, rng);
        match mlp {
            Some(m) => {
                let (w, b) = (tape.param(m.w), tape.param(m.b));
                let y = tape.linear(x, w, Some(b))?;
                Ok(tape.tanh(y))
            }
            None => Ok(x),
        }
    }

    fn check_width(&self, what: &'static str, t: &Tensor, expected: usize) -> Result<()> {
        if t.shape().len() != 2 || t.cols() != expected {
            return Err(Error::Shape { op: what, left: vec![t.rows(), expected], right: t.shape().to_vec() });
        }
        Ok(())
    }

    /// Initial state and context from raw `[B, ·]` seed and context inputs.
    fn encode(
        &self,
        tape: &mut Tape<'_>,
        seed_in: Tensor,
        ctx_in: Tensor,
        rng: &mut RngStream,
    ) -> Result<(StateVars, Var)> {
        let spec = &self.config.spec;
        self.check_width("seed input", &seed_in, spec.seed.input_dim())?;
        self.check_width("context input", &ctx_in, spec.context.input_dim())?;
        let b = seed_in.rows();
        let s = self.source(tape, seed_in, self.ids.seed_mlp, rng)?;
        let ctx = self.source(tape, ctx_in, self.ids.ctx_mlp, rng)?;
        let (w, bs) = (tape.param(self.ids.seed_w), tape.param(self.ids.seed_b));
        let h0 = tape.linear(s, w, Some(bs))?;
        let h0 = tape.tanh(h0);
        let c0 = match self.config.rnn {
            RnnKind::Gru => None,
            RnnKind::Lstm => Some(tape.constant(Tensor::zeros(&[b, self.config.hidden]))),
        };
        Ok((StateVars { h: h0, c: c0 }, ctx))
    }

    fn rnn(&self, tape: &mut Tape<'_>, x: Var, state: StateVars) -> Result<StateVars> {
        let hd = self.config.hidden;
        let (wx, wh) = (tape.param(self.ids.rnn_wx), tape.param(self.ids.rnn_wh));
        let (bx, bh) = (tape.param(self.ids.rnn_bx), tape.param(self.ids.rnn_bh));
        let gx = tape.linear(x, wx, Some(bx))?;
        let gh = tape.linear(state.h, wh, Some(bh))?;
        match self.config.rnn {
            RnnKind::Gru => {
                // r, z, n in that column order; n = tanh(x·W_n + r ⊙ (h·U_n))
                let xr = tape.slice_cols(gx, 0, hd)?;
                let xz = tape.slice_cols(gx, hd, hd)?;
                let xn = tape.slice_cols(gx, 2 * hd, hd)?;
                let hr = tape.slice_cols(gh, 0, hd)?;
                let hz = tape.slice_cols(gh, hd, hd)?;
                let hn = tape.slice_cols(gh, 2 * hd, hd)?;
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r);
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z);
                let rh = tape.mul(r, hn)?;
                let n = tape.add(xn, rh)?;
                let n = tape.tanh(n);
                // h' = (1 − z) ⊙ n + z ⊙ h
                let d = tape.sub(state.h, n)?;
                let zd = tape.mul(z, d)?;
                let h = tape.add(n, zd)?;
                Ok(StateVars { h, c: None })
            }
            RnnKind::Lstm => {
                let g = tape.add(gx, gh)?;
                let i = tape.slice_cols(g, 0, hd)?;
                let f = tape.slice_cols(g, hd, hd)?;
                let gg = tape.slice_cols(g, 2 * hd, hd)?;
                let o = tape.slice_cols(g, 3 * hd, hd)?;
                let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
                let gg = tape.tanh(gg);
                let c_prev = state.c.ok_or(Error::Empty("lstm cell state"))?;
                let fc = tape.mul(f, c_prev)?;
                let ig = tape.mul(i, gg)?;
                let c = tape.add(fc, ig)?;
                let tc = tape.tanh(c);
                let h = tape.mul(o, tc)?;
                Ok(StateVars { h, c: Some(c) })
            }
        }
    }

    fn step_vars(
        &self,
        tape: &mut Tape<'_>,
        prev: &[usize],
        state: StateVars,
        ctx: Var,
        rng: &mut RngStream,
    ) -> Result<StepVars> {
        let cfg = &self.config;
        if let Some(&bad) = prev.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Shape { op: "defmod token", left: vec![cfg.vocab_size], right: vec![bad] });
        }
        let table = tape.param(self.ids.embed);
        let x = tape.embedding(table, prev)?;
        let x = tape.dropout(x, cfg.dropout_input, rng);
        let new_state = self.rnn(tape, x, state)?;
        let ht = tape.dropout(new_state.h, cfg.dropout_network, rng);

        let ch = tape.concat(&[ctx, ht])?;
        let (wz, bz) = (tape.param(self.ids.gate_wz), tape.param(self.ids.gate_bz));
        let z = tape.linear(ch, wz, Some(bz))?;
        let z = tape.sigmoid(z);
        let (wr, br) = (tape.param(self.ids.gate_wr), tape.param(self.ids.gate_br));
        let r = tape.linear(ch, wr, Some(br))?;
        let r = tape.sigmoid(r);
        let rc = tape.mul(r, ctx)?;
        let rch = tape.concat(&[rc, ht])?;
        let (wh, bh) = (tape.param(self.ids.gate_wh), tape.param(self.ids.gate_bh));
        let cand = tape.linear(rch, wh, Some(bh))?;
        let cand = tape.tanh(cand);
        // o = (1 − z) ⊙ h_t + z ⊙ h̃
        let d = tape.sub(cand, ht)?;
        let zd = tape.mul(z, d)?;
        let o = tape.add(ht, zd)?;
        let o_drop = tape.dropout(o, cfg.dropout_network, rng);
        let (w, b) = (tape.param(self.ids.out_w), tape.param(self.ids.out_b));
        let logits = tape.linear(o_drop, w, Some(b))?;
        Ok(StepVars { logits, rnn_out: ht, gate: z, candidate: cand, output: o, state: new_state })
    }

    /// Raw seed and context inputs for a batch of embedding sets.
    pub fn inputs(&self, batch: &[(&str, &Embeddings)]) -> Result<(Tensor, Tensor)> {
        let spec = &self.config.spec;
        let mut seed = Vec::with_capacity(batch.len() * spec.seed.input_dim());
        let mut ctx = Vec::with_capacity(batch.len() * spec.context.input_dim());
        for (id, e) in batch {
            seed.extend(spec.seed.gather(id, e)?);
            ctx.extend(spec.context.gather(id, e)?);
        }
        Ok((
            Tensor::new(vec![batch.len(), spec.seed.input_dim()], seed)?,
            Tensor::new(vec![batch.len(), spec.context.input_dim()], ctx)?,
        ))
    }

    /// Eval-mode initial state and network-side context vector.
    pub fn initial_state(&self, seed_in: &Tensor, ctx_in: &Tensor) -> Result<(State, Tensor)> {
        let mut tape = Tape::with_params(&self.params, false);
        let mut rng = RngStream::new(0, 0);
        let (sv, ctx) = self.encode(&mut tape, seed_in.clone(), ctx_in.clone(), &mut rng)?;
        let state = State { h: tape.value(sv.h).clone(), c: sv.c.map(|c| tape.value(c).clone()) };
        Ok((state, tape.value(ctx).clone()))
    }

    /// One eval-mode decoding step with every intermediate exposed. `ctx`
    /// is the network-side context from [`DefmodModel::initial_state`].
    pub fn step_trace(&self, prev: &[usize], state: &State, ctx: &Tensor) -> Result<StepTrace> {
        let cd = self.config.spec.context.output_dim();
        self.check_width("context", ctx, cd)?;
        self.check_width("hidden state", &state.h, self.config.hidden)?;
        if ctx.rows() != prev.len() || state.h.rows() != prev.len() {
            return Err(Error::Shape {
                op: "forward_step batch",
                left: vec![prev.len()],
                right: vec![ctx.rows(), state.h.rows()],
            });
        }
        let mut tape = Tape::with_params(&self.params, false);
        let mut rng = RngStream::new(0, 0);
        let h = tape.constant(state.h.clone());
        let c = match (&state.c, self.config.rnn) {
            (Some(c), RnnKind::Lstm) => Some(tape.constant(c.clone())),
            (None, RnnKind::Gru) => None,
            _ => return Err(Error::config("state does not match the rnn type")),
        };
        let cv = tape.constant(ctx.clone());
        let sv = self.step_vars(&mut tape, prev, StateVars { h, c }, cv, &mut rng)?;
        let lp = tape.log_softmax(sv.logits);
        Ok(StepTrace {
            log_probs: tape.value(lp).clone(),
            rnn_out: tape.value(sv.rnn_out).clone(),
            gate: tape.value(sv.gate).clone(),
            candidate: tape.value(sv.candidate).clone(),
            output: tape.value(sv.output).clone(),
            state: State { h: tape.value(sv.state.h).clone(), c: sv.state.c.map(|c| tape.value(c).clone()) },
        })
    }

    /// Token log-probabilities `[B, V]` and the next state.
    pub fn forward_step(&self, prev: &[usize], state: &State, ctx: &Tensor) -> Result<(Tensor, State)> {
        let t = self.step_trace(prev, state, ctx)?;
        Ok((t.log_probs, t.state))
    }

    /// Decoder for one input, for use with the search functions.
    pub fn conditioned(&self, id: &str, embeddings: &Embeddings) -> Result<Conditioned<'_>> {
        let (s, c) = self.inputs(&[(id, embeddings)])?;
        let (state, ctx) = self.initial_state(&s, &c)?;
        Ok(Conditioned { model: self, state, ctx })
    }

    /// Beam-search decode of one input into token ids (no bos/eos).
    pub fn generate(&self, id: &str, embeddings: &Embeddings, beam_width: usize) -> Result<GlossSequence> {
        let cond = self.conditioned(id, embeddings)?;
        beam_search(&cond, beam_width, self.config.max_len)
    }
}

/// A model bound to one input's state and context.
pub struct Conditioned<'m> {
    model: &'m DefmodModel,
    state: State,
    ctx: Tensor,
}

#[derive(Debug, Clone)]
pub struct RowState {
    h: Vec<f32>,
    c: Option<Vec<f32>>,
}

fn stack(rows: impl Iterator<Item = Vec<f32>>, width: usize) -> Result<Tensor> {
    let data: Vec<f32> = rows.flatten().collect();
    Tensor::new(vec![data.len() / width.max(1), width], data)
}

impl StepModel for Conditioned<'_> {
    type State = RowState;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn initial(&self) -> RowState {
        RowState { h: self.state.h.data().to_vec(), c: self.state.c.as_ref().map(|c| c.data().to_vec()) }
    }

    fn step(&self, prev: &[usize], states: &[RowState]) -> Result<(Vec<Vec<f64>>, Vec<RowState>)> {
        let hd = self.model.config.hidden;
        let k = prev.len();
        let h = stack(states.iter().map(|s| s.h.clone()), hd)?;
        let c = match self.model.config.rnn {
            RnnKind::Gru => None,
            RnnKind::Lstm => Some(stack(states.iter().map(|s| s.c.clone().unwrap_or_else(|| vec![0.0; hd])), hd)?),
        };
        let cw = self.ctx.cols();
        let ctx = stack((0..k).map(|_| self.ctx.data().to_vec()), cw)?;
        let (lp, next) = self.model.forward_step(prev, &State { h, c }, &ctx)?;
        let v = lp.cols();
        let rows = (0..k).map(|i| lp.data()[i * v..(i + 1) * v].iter().map(|&x| x as f64).collect()).collect();
        let new = (0..k)
            .map(|i| RowState { h: next.h.row(i).to_vec(), c: next.c.as_ref().map(|c| c.row(i).to_vec()) })
            .collect();
        Ok((rows, new))
    }
}

/// Too short or not a word: fewer than two characters after trimming, or
/// no alphabetic character at all.
pub fn is_deformed(text: &str) -> bool {
    let t = text.trim();
    t.chars().count() < 2 || !t.chars().any(char::is_alphabetic)
}

/// Anything that turns an embedding set into gloss text.
pub trait GlossGenerator {
    fn generate_text(&self, id: &str, embeddings: &Embeddings) -> Result<String>;
}

/// A trained model plus the tokenizer and search width used to decode it.
pub struct Decoder<'a> {
    pub model: &'a DefmodModel,
    pub tokenizer: &'a TokenizerModel,
    pub beam_width: usize,
}

impl GlossGenerator for Decoder<'_> {
    fn generate_text(&self, id: &str, embeddings: &Embeddings) -> Result<String> {
        let seq = self.model.generate(id, embeddings, self.beam_width)?;
        Ok(self.tokenizer.decode(seq.content()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub text: String,
    pub used_fallback: bool,
    /// Set when even the chosen output is deformed.
    pub deformed: bool,
}

/// Main model output unless it is deformed, in which case the fallback's
/// output is used if that one is not.
pub fn generate_with_fallback(
    main: &dyn GlossGenerator,
    fallback: Option<&dyn GlossGenerator>,
    id: &str,
    embeddings: &Embeddings,
) -> Result<Generated> {
    let text = main.generate_text(id, embeddings)?;
    if !is_deformed(&text) {
        return Ok(Generated { text, used_fallback: false, deformed: false });
    }
    if let Some(fb) = fallback {
        let alt = fb.generate_text(id, embeddings)?;
        if !is_deformed(&alt) {
            return Ok(Generated { text: alt, used_fallback: true, deformed: false });
        }
    }
    Ok(Generated { text, used_fallback: false, deformed: true })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gloss: String,
}

pub fn save_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    write_atomic(path, &to_json_bytes(&predictions)?)
}
