//! Teacher-forced training.

use serde::{Deserialize, Serialize};

use super::{DefmodModel, SeedContextSpec};
use crate::corpus::AtomicGloss;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{AdamW, AdamWConfig, LrSchedule, Optimizer, Tape, Tensor, Var};
use crate::tokenizer::{TokenizerModel, BOS, EOS, PAD};

/// One training pair: gloss tokens (without bos/eos, already truncated)
/// and the raw seed and context inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<usize>,
    pub seed: Vec<f32>,
    pub context: Vec<f32>,
}

/// Tokenizes atomic glosses and gathers their inputs. Each atomic gloss is
/// its own example, so a split gloss contributes several.
pub fn prepare_examples(
    glosses: &[AtomicGloss],
    tokenizer: &TokenizerModel,
    spec: &SeedContextSpec,
    max_len: usize,
) -> Result<Vec<Example>> {
    spec.validate()?;
    if glosses.is_empty() {
        return Err(Error::Empty("defmod dataset"));
    }
    glosses
        .iter()
        .map(|g| {
            let mut tokens = tokenizer.encode(&g.text);
            tokens.truncate(max_len);
            Ok(Example {
                id: g.parent_id.clone(),
                tokens,
                seed: spec.seed.gather(&g.parent_id, &g.embeddings)?,
                context: spec.context.gather(&g.parent_id, &g.embeddings)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub plateau_factor: f32,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Relative dev-loss improvement that counts as progress.
    pub early_stop_min_rel: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 10,
            early_stop_min_rel: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Stops once the monitored loss has gone `patience` epochs without beating
/// the best value by more than `min_rel` (relative).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_rel: f64,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_rel: f64) -> Self {
        EarlyStopping { patience, min_rel, best: None, bad: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records one epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - self.min_rel * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        (improved, self.bad >= self.patience)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub lr: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Eval-mode losses of the untrained model.
    pub initial_train_loss: f64,
    pub initial_dev_loss: Option<f64>,
    pub epochs: Vec<EpochReport>,
    /// Epoch with the lowest monitored loss, whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean per-token cross-entropy of a batch, padding excluded.
fn batch_loss(model: &DefmodModel, tape: &mut Tape<'_>, batch: &[&Example], rng: &mut RngStream) -> Result<Var> {
    let spec = &model.config().spec;
    let seed = Tensor::new(
        vec![batch.len(), spec.seed.input_dim()],
        batch.iter().flat_map(|e| e.seed.iter().copied()).collect(),
    )?;
    let ctx = Tensor::new(
        vec![batch.len(), spec.context.input_dim()],
        batch.iter().flat_map(|e| e.context.iter().copied()).collect(),
    )?;
    let (mut state, ctx) = model.encode(tape, seed, ctx, rng)?;
    let steps = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0) + 1;
    let total: usize = batch.iter().map(|e| e.tokens.len() + 1).sum();
    let mut loss: Option<Var> = None;
    for t in 0..steps {
        let prev: Vec<usize> = batch
            .iter()
            .map(|e| match t {
                0 => BOS,
                _ => e.tokens.get(t - 1).copied().unwrap_or(PAD),
            })
            .collect();
        let target: Vec<usize> = batch
            .iter()
            .map(|e| match t.cmp(&e.tokens.len()) {
                std::cmp::Ordering::Less => e.tokens[t],
                std::cmp::Ordering::Equal => EOS,
                std::cmp::Ordering::Greater => PAD,
            })
            .collect();
        let n = target.iter().filter(|&&x| x != PAD).count();
        let sv = model.step_vars(tape, &prev, state, ctx, rng)?;
        state = sv.state;
        let ce = tape.cross_entropy(sv.logits, &target, Some(PAD))?;
        let part = tape.scale(ce, n as f32 / total as f32);
        loss = Some(match loss {
            None => part,
            Some(l) => tape.add(l, part)?,
        });
    }
    loss.ok_or(Error::Empty("defmod batch"))
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(n))
}

/// Token-weighted mean cross-entropy in eval mode.
pub fn evaluate_loss(model: &DefmodModel, examples: &[Example], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("defmod evaluation set"));
    }
    let mut rng = RngStream::new(0, 0);
    let (mut sum, mut tokens) = (0.0f64, 0usize);
    for r in batches(examples.len(), batch_size.max(1)) {
        let batch: Vec<&Example> = examples[r].iter().collect();
        let n: usize = batch.iter().map(|e| e.tokens.len() + 1).sum();
        let mut tape = Tape::with_params(model.params(), false);
        let l = batch_loss(model, &mut tape, &batch, &mut rng)?;
        sum += tape.value(l).data()[0] as f64 * n as f64;
        tokens += n;
    }
    Ok(sum / tokens as f64)
}

/// Trains in place with AdamW, a plateau schedule on the monitored loss
/// (dev if given, else train) and early stopping. The parameters of the best
/// epoch are restored at the end.
pub fn train(model: &mut DefmodModel, train: &[Example], dev: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("defmod training set"));
    }
    let root = RngStream::new(cfg.seed, 0x6465_666d);
    let mut order_rng = root.split(1);
    let mut drop_rng = root.split(2);
    let initial_train_loss = evaluate_loss(model, train, cfg.batch_size)?;
    let initial_dev_loss = if dev.is_empty() { None } else { Some(evaluate_loss(model, dev, cfg.batch_size)?) };

    let adam = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(adam, model.params());
    let mut sched = LrSchedule::plateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.early_stop_min_rel);
    let mut best = model.params().clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut sum, mut tokens) = (0.0f64, 0usize);
        for r in batches(order.len(), cfg.batch_size) {
            let batch: Vec<&Example> = order[r].iter().map(|&i| &train[i]).collect();
            let n: usize = batch.iter().map(|e| e.tokens.len() + 1).sum();
            let grads = {
                let mut tape = Tape::with_params(model.params(), true);
                let loss = batch_loss(model, &mut tape, &batch, &mut drop_rng)?;
                let v = tape.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("defmod loss became {v} in epoch {epoch}")));
                }
                sum += v as f64 * n as f64;
                tokens += n;
                tape.backward(loss)?
            };
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads);
            opt.step(params);
        }
        let train_loss = sum / tokens as f64;
        let dev_loss = if dev.is_empty() { None } else { Some(evaluate_loss(model, dev, cfg.batch_size)?) };
        let monitored = dev_loss.unwrap_or(train_loss);
        let lr = opt.lr();
        opt.set_lr(sched.observe(monitored as f32));
        let (_, stop) = stopper.observe(monitored);
        if monitored < best_loss {
            best_loss = monitored;
            best.copy_from(model.params())?;
            best_epoch = epoch;
        }
        log::info!("defmod epoch {epoch}: train {train_loss:.4} dev {dev_loss:?} lr {lr:e}");
        epochs.push(EpochReport { epoch, train_loss, dev_loss, lr });
        if stop {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    model.params_mut().copy_from(&best)?;
    Ok(TrainReport { initial_train_loss, initial_dev_loss, epochs, best_epoch, stopped_early })
}
