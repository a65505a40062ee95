//! Regression training for the reverse dictionary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{tokenize_gloss, RevdictModel};
use crate::corpus::{EmbeddingKind, GlossRecord};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::RngStream;
use crate::tensor::{AdamW, AdamWConfig, Gradients, LrSchedule, Optimizer, Tape, Tensor, Var};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, PartialEq)]
pub struct RevdictExample {
    pub id: String,
    /// bos, gloss pieces, eos.
    pub tokens: Vec<usize>,
    pub targets: BTreeMap<EmbeddingKind, Vec<f32>>,
}

/// Tokenizes glosses and collects the configured target vectors.
pub fn prepare_examples(
    records: &[GlossRecord],
    tokenizer: &TokenizerModel,
    targets: &[EmbeddingKind],
    max_len: usize,
) -> Result<Vec<RevdictExample>> {
    if records.is_empty() {
        return Err(Error::Empty("revdict dataset"));
    }
    records
        .iter()
        .map(|r| {
            let mut t = BTreeMap::new();
            for &k in targets {
                let v = r.embeddings.get(k).ok_or_else(|| Error::validation(&r.id, format!("missing {k} target")))?;
                t.insert(k, v.to_vec());
            }
            Ok(RevdictExample { id: r.id.clone(), tokens: tokenize_gloss(tokenizer, &r.gloss, max_len), targets: t })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheduler {
    /// Linear warmup over the given share of all steps, then cosine to 0.
    Cosine {
        warmup_fraction: f64,
    },
    /// Multiply the rate by `factor` when dev MSE stalls for `patience`
    /// epochs.
    Plateau {
        factor: f32,
        patience: usize,
    },
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevdictTrainConfig {
    pub batch_size: usize,
    /// Sequences per forward pass; gradients are summed over the micro
    /// batches of one optimizer step.
    pub micro_batch: usize,
    pub max_epochs: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub scheduler: Scheduler,
    /// Weight of the `1 − cos` term.
    pub cos_lambda: f32,
    pub seed: u64,
}

impl Default for RevdictTrainConfig {
    fn default() -> Self {
        RevdictTrainConfig {
            batch_size: 1024,
            micro_batch: 64,
            max_epochs: 20,
            lr: 1e-3,
            weight_decay: 0.01,
            scheduler: Scheduler::Cosine { warmup_fraction: 0.1 },
            cos_lambda: 0.0,
            seed: 0,
        }
    }
}

impl RevdictTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size, micro_batch and max_epochs must be positive"));
        }
        if !(self.lr > 0.0) || self.cos_lambda < 0.0 {
            return Err(Error::config("lr must be positive and cos_lambda non-negative"));
        }
        if let Scheduler::Cosine { warmup_fraction } = self.scheduler {
            if !(0.0..1.0).contains(&warmup_fraction) {
                return Err(Error::config("warmup_fraction must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Primary-head scores on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub cos: f64,
    pub cka: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevdictEpoch {
    pub epoch: usize,
    /// Mean training loss; absent for the epoch-0 evaluation.
    pub train_loss: Option<f64>,
    pub dev: Option<Evaluation>,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevdictReport {
    pub epochs: Vec<RevdictEpoch>,
    /// Epoch with the lowest dev MSE, whose parameters were kept.
    pub best_epoch: usize,
}

fn batch_loss(
    model: &RevdictModel,
    tape: &mut Tape<'_>,
    batch: &[&RevdictExample],
    weights: &BTreeMap<EmbeddingKind, f32>,
    cos_lambda: f32,
    rng: &mut RngStream,
) -> Result<Var> {
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let fwd = model.forward(tape, &seqs, rng)?;
    let mut loss: Option<Var> = None;
    for (kind, pred) in fwd.outputs {
        let w = weights.get(&kind).copied().unwrap_or(0.0);
        if w == 0.0 {
            continue;
        }
        let mut target = Vec::with_capacity(batch.len() * crate::corpus::EMBEDDING_DIM);
        for e in batch {
            let v = e.targets.get(&kind).ok_or_else(|| Error::validation(&e.id, format!("missing {kind} target")))?;
            target.extend_from_slice(v);
        }
        let target = tape.constant(Tensor::new(tape.shape(pred).to_vec(), target)?);
        let mut term = tape.mse(pred, target)?;
        if cos_lambda > 0.0 {
            let c = tape.cosine_similarity(pred, target)?;
            let c = tape.mean_all(c);
            let one = tape.constant(Tensor::scalar(1.0));
            let gap = tape.sub(one, c)?;
            let gap = tape.scale(gap, cos_lambda);
            term = tape.add(term, gap)?;
        }
        let term = tape.scale(term, w);
        loss = Some(match loss {
            None => term,
            Some(l) => tape.add(l, term)?,
        });
    }
    loss.ok_or_else(|| Error::config("every regression head has zero loss weight"))
}

/// Gradients of the weighted loss on one batch, in training mode. Heads
/// absent from `weights` do not contribute.
pub fn batch_gradients(
    model: &RevdictModel,
    batch: &[&RevdictExample],
    weights: &BTreeMap<EmbeddingKind, f32>,
    seed: u64,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::with_params(model.params(), true);
    let mut rng = RngStream::new(seed, 0);
    let loss = batch_loss(model, &mut tape, batch, weights, 0.0, &mut rng)?;
    Ok((tape.value(loss).data()[0] as f64, tape.backward(loss)?))
}

/// Primary-head MSE, cosine and linear CKA on `examples`.
pub fn evaluate(model: &RevdictModel, examples: &[RevdictExample], chunk: usize) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Empty("revdict evaluation set"));
    }
    let primary = model.config().primary;
    let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
    let preds = model.predict_primary(&seqs, chunk)?;
    let gts: Vec<&[f32]> = examples
        .iter()
        .map(|e| {
            e.targets
                .get(&primary)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::validation(&e.id, format!("missing {primary} target")))
        })
        .collect::<Result<_>>()?;
    let preds: Vec<&[f32]> = preds.iter().map(Vec::as_slice).collect();
    Ok(Evaluation {
        mse: metrics::mse(&preds, &gts)?,
        cos: metrics::cos(&preds, &gts)?,
        cka: metrics::cka_linear(&preds, &gts)?,
    })
}

/// AdamW training with equal head weights. With a dev set, the epoch with
/// the lowest dev MSE is restored at the end.
pub fn train(
    model: &mut RevdictModel,
    train: &[RevdictExample],
    dev: &[RevdictExample],
    cfg: &RevdictTrainConfig,
) -> Result<RevdictReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("revdict training set"));
    }
    let weights: BTreeMap<EmbeddingKind, f32> = model.config().targets.iter().map(|&k| (k, 1.0)).collect();
    let root = RngStream::new(cfg.seed, 0x7265_7664);
    let mut order_rng = root.split(1);
    let mut drop_rng = root.split(2);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.max_epochs;
    let mut sched = match cfg.scheduler {
        Scheduler::Cosine { warmup_fraction } => {
            LrSchedule::cosine_warmup(cfg.lr, 0.0, (warmup_fraction * total as f64).ceil() as usize, total)
        }
        Scheduler::Plateau { factor, patience } => LrSchedule::plateau(cfg.lr, factor, patience),
        Scheduler::Constant => LrSchedule::Constant { lr: cfg.lr },
    };
    let adam = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(adam, model.params());
    let eval_dev = |m: &RevdictModel| -> Result<Option<Evaluation>> {
        if dev.is_empty() {
            Ok(None)
        } else {
            evaluate(m, dev, cfg.micro_batch).map(Some)
        }
    };

    let first = eval_dev(model)?;
    let mut best_mse = first.map_or(f64::INFINITY, |e| e.mse);
    let mut best = model.params().clone();
    let mut best_epoch = 0;
    let mut epochs = vec![RevdictEpoch { epoch: 0, train_loss: None, dev: first, lr: cfg.lr }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            if sched.is_per_step() {
                opt.set_lr(sched.lr_at(step));
            }
            model.params_mut().zero_grad();
            for micro in chunk.chunks(cfg.micro_batch) {
                let batch: Vec<&RevdictExample> = micro.iter().map(|&i| &train[i]).collect();
                let share = micro.len() as f32 / chunk.len() as f32;
                let grads = {
                    let mut tape = Tape::with_params(model.params(), true);
                    let l = batch_loss(model, &mut tape, &batch, &weights, cfg.cos_lambda, &mut drop_rng)?;
                    let l = tape.scale(l, share);
                    let v = tape.value(l).data()[0];
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!("revdict loss became {v} in epoch {epoch}")));
                    }
                    loss_sum += v as f64 * chunk.len() as f64;
                    tape.backward(l)?
                };
                model.params_mut().accumulate(&grads);
            }
            opt.step(model.params_mut());
        }
        let lr = opt.lr();
        let ev = eval_dev(model)?;
        if let (Some(e), LrSchedule::Plateau { .. }) = (ev, &sched) {
            opt.set_lr(sched.observe(e.mse as f32));
        }
        if let Some(e) = ev {
            if e.mse < best_mse {
                best_mse = e.mse;
                best.copy_from(model.params())?;
                best_epoch = epoch;
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        log::info!("revdict epoch {epoch}: train {train_loss:.5} dev {ev:?} lr {lr:e}");
        epochs.push(RevdictEpoch { epoch, train_loss: Some(train_loss), dev: ev, lr });
    }
    if dev.is_empty() {
        best_epoch = cfg.max_epochs;
    } else {
        model.params_mut().copy_from(&best)?;
    }
    Ok(RevdictReport { epochs, best_epoch })
}
