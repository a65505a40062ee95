use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glosslab::corpus::{
    gloss_stats, load_dataset, load_dataset_with, save_dataset, transform_dataset, vector_stats, EmbeddingKind,
    GlossRecord, LoadOptions,
};
use glosslab::defmod::{self, Decoder, DefmodConfig, DefmodModel, GlossGenerator, Prediction};
use glosslab::glove;
use glosslab::hyperopt::{self, BhoOptions, GridPoint, TrialOutcome, GRID_VALUES};
use glosslab::io::{read_to_string, to_json_bytes, write_atomic};
use glosslab::metrics::{self, MetricReport};
use glosslab::revdict::{self, GlossEncoder, RetrievalIndex, RevdictModel};
use glosslab::rng::RngStream;
use glosslab::tokenizer::{self, TokenizerModel};
use glosslab::Error;
use serde_json::{json, Value};

use crate::config::{require_file, required, RunConfig};
use crate::rundir::{RunDir, TOKENIZER_FILE};
use crate::{Command, Common};

/// Rows per forward pass at prediction and evaluation time.
const CHUNK: usize = 64;

pub fn run(common: &Common, command: Command) -> Result<()> {
    let mut overrides = common.set.clone();
    if let Some(l) = &common.lang {
        overrides.push(format!("language={l}"));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    let set = |slot: &mut Option<PathBuf>, flag: Option<PathBuf>| {
        if flag.is_some() {
            *slot = flag;
        }
    };
    let p = &mut cfg.paths;
    match command {
        Command::Prepare { input, out } => {
            require_file(&input)?;
            prepare(&cfg, &input, &out)
        }
        Command::TokenizerTrain { train, out } => {
            set(&mut p.train, train);
            set(&mut p.out, out);
            cfg.check_inputs()?;
            tokenizer_train(&cfg)
        }
        Command::GloveTrain { train, tokenizer, out } => {
            set(&mut p.train, train);
            set(&mut p.tokenizer, tokenizer);
            set(&mut p.out, out);
            cfg.check_inputs()?;
            glove_train(&cfg)
        }
        Command::DefmodTrain { train, dev, tokenizer, glove, preset, out } => {
            set(&mut p.train, train);
            set(&mut p.dev, dev);
            set(&mut p.tokenizer, tokenizer);
            set(&mut p.glove, glove);
            set(&mut p.out, out);
            if let Some(pr) = preset {
                cfg.defmod.preset = pr.parse()?;
            }
            cfg.check_inputs()?;
            defmod_train(&cfg)
        }
        Command::RevdictTrain { train, dev, tokenizer, glove, preset, target, out } => {
            set(&mut p.train, train);
            set(&mut p.dev, dev);
            set(&mut p.tokenizer, tokenizer);
            set(&mut p.glove, glove);
            set(&mut p.out, out);
            if let Some(pr) = preset {
                cfg.revdict.preset = pr;
            }
            if let Some(t) = target {
                cfg.revdict.target = t.parse()?;
            }
            cfg.check_inputs()?;
            revdict_train(&cfg)
        }
        Command::Predict { model, input, out, tokenizer, beam_width } => {
            require_file(&input)?;
            if let Some(t) = &tokenizer {
                require_file(t)?;
            }
            if let Some(b) = beam_width {
                cfg.defmod.beam_width = b;
            }
            predict(&cfg, &model, &input, &out, tokenizer.as_deref())
        }
        Command::Evaluate { predictions, reference, out } => {
            require_file(&predictions)?;
            require_file(&reference)?;
            evaluate(&cfg, &predictions, &reference, out.as_deref())
        }
        Command::Stats { input, data, split, transformed, out } => {
            set(&mut p.data, data);
            cfg.check_inputs()?;
            let input = match input {
                Some(i) => i,
                None => required(&cfg.paths.data, "data")?.join(format!("{}.{split}.json", cfg.language.code())),
            };
            require_file(&input)?;
            stats(&cfg, &input, &split, transformed, out.as_deref())
        }
        Command::Hyperopt { train, dev, test, tokenizer, preset, points, grid, out } => {
            set(&mut p.train, train);
            set(&mut p.dev, dev);
            set(&mut p.test, test);
            set(&mut p.tokenizer, tokenizer);
            set(&mut p.out, out);
            if let Some(pr) = preset {
                cfg.revdict.preset = pr;
            }
            if points.is_some() {
                cfg.hyperopt.points = points;
            }
            cfg.hyperopt.grid |= grid;
            cfg.check_inputs()?;
            hyperopt_run(&cfg)
        }
        Command::Query { model, index, tokenizer, k } => {
            require_file(&index)?;
            if let Some(t) = &tokenizer {
                require_file(t)?;
            }
            query(&cfg, &model, &index, tokenizer.as_deref(), k)
        }
        Command::Synth { out, train, dev, test } => synth(&cfg, &out, train, dev, test),
    }
}

fn prepare(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let records = load_dataset(input, cfg.language)?;
    let t = transform_dataset(&records);
    save_dataset(&out.join("transformed.json"), &t.to_records(cfg.language))?;
    write_atomic(&out.join("transform.log"), t.log_text().as_bytes())?;
    log::info!(
        "{} records became {} glosses ({} empty segments dropped)",
        records.len(),
        t.glosses.len(),
        t.dropped_segments
    );
    Ok(())
}

fn atomic_texts(records: &[GlossRecord]) -> Vec<String> {
    transform_dataset(records).glosses.into_iter().map(|g| g.text).collect()
}

fn load_tokenizer(cfg: &RunConfig) -> Result<TokenizerModel> {
    let p = required(&cfg.paths.tokenizer, "tokenizer")?;
    TokenizerModel::load(p).with_context(|| format!("loading tokenizer {}", p.display()))
}

fn tokenizer_train(cfg: &RunConfig) -> Result<()> {
    let records = load_dataset(required(&cfg.paths.train, "train")?, cfg.language)?;
    let out = required(&cfg.paths.out, "out")?;
    let texts = atomic_texts(&records);
    let (model, report) = tokenizer::train(&texts, &cfg.tokenizer)?;
    let rd = RunDir::create(out, cfg)?;
    model.save(&rd.path(TOKENIZER_FILE))?;
    rd.finish(&json!({
        "vocab_size": model.vocab_size(),
        "fingerprint": model.fingerprint(),
        "training_glosses": texts.len(),
        "em": report,
    }))
}

fn glove_train(cfg: &RunConfig) -> Result<()> {
    let records = load_dataset(required(&cfg.paths.train, "train")?, cfg.language)?;
    let out = required(&cfg.paths.out, "out")?;
    let tok = load_tokenizer(cfg)?;
    let (table, report) = glove::train_on_glosses(&atomic_texts(&records), &tok, &cfg.glove)?;
    let rd = RunDir::create(out, cfg)?;
    glove::save_embeddings(&rd.path("glove.txt"), &tok, &table)?;
    rd.finish(&json!({ "tokenizer_fingerprint": tok.fingerprint(), "objective": report.objective }))
}

fn load_glove(
    cfg: &RunConfig,
    tok: &TokenizerModel,
    dim: usize,
    what: &str,
) -> Result<Option<glosslab::tensor::Tensor>> {
    let Some(p) = &cfg.paths.glove else { return Ok(None) };
    let table = glove::load_embeddings(p, tok)?;
    if table.cols() != dim {
        bail!(Error::config(format!("{what} is {dim} but the GloVe vectors in {} have {}", p.display(), table.cols())));
    }
    Ok(Some(table))
}

fn defmod_train(cfg: &RunConfig) -> Result<()> {
    let lang = cfg.language;
    let train = load_dataset(required(&cfg.paths.train, "train")?, lang)?;
    let dev = match &cfg.paths.dev {
        Some(p) => load_dataset(p, lang)?,
        None => Vec::new(),
    };
    let out = required(&cfg.paths.out, "out")?;
    let tok = load_tokenizer(cfg)?;
    let d = &cfg.defmod;
    let preset = d.preset.spec(lang);
    let glove = load_glove(cfg, &tok, d.embed_dim, "defmod.embed_dim")?;
    let mut models = vec![("main", d.spec.clone().unwrap_or(preset.main), d.rnn.unwrap_or(preset.main_rnn))];
    if d.fallback {
        models.push(("fallback", preset.fallback, d.rnn.unwrap_or(preset.fallback_rnn)));
    }
    let mut tc = d.train.clone();
    tc.epochs = d.epochs.unwrap_or(preset.epochs);
    let train_atoms = transform_dataset(&train).glosses;
    let dev_atoms = transform_dataset(&dev).glosses;
    let rd = RunDir::create(out, cfg)?;
    tok.save(&rd.path(TOKENIZER_FILE))?;
    let mut reports = BTreeMap::new();
    for (i, (name, spec, rnn)) in models.into_iter().enumerate() {
        spec.check_language(lang)?;
        let mc = DefmodConfig {
            spec: spec.clone(),
            rnn,
            hidden: d.hidden,
            embed_dim: d.embed_dim,
            vocab_size: tok.vocab_size(),
            dropout_input: d.dropout_input,
            dropout_network: d.dropout_network,
            max_len: d.max_len,
        };
        let tr = defmod::prepare_examples(&train_atoms, &tok, &spec, d.max_len)?;
        let dv = if dev_atoms.is_empty() {
            Vec::new()
        } else {
            defmod::prepare_examples(&dev_atoms, &tok, &spec, d.max_len)?
        };
        let mut model = DefmodModel::new(mc, &mut RngStream::new(cfg.seed, 0x646d_0000 + i as u64))?;
        model.set_vocab_fingerprint(tok.fingerprint());
        if let Some(t) = &glove {
            model.set_embeddings(t)?;
        }
        log::info!("training {name} model ({}, {:?}) on {} glosses", spec.context.label(), rnn, tr.len());
        let report = defmod::train(&mut model, &tr, &dv, &tc)?;
        model.save(&rd.path(name))?;
        reports.insert(name, report);
    }
    rd.finish(&reports)
}

fn revdict_train(cfg: &RunConfig) -> Result<()> {
    let lang = cfg.language;
    let train = load_dataset(required(&cfg.paths.train, "train")?, lang)?;
    let dev = match &cfg.paths.dev {
        Some(p) => load_dataset(p, lang)?,
        None => Vec::new(),
    };
    let out = required(&cfg.paths.out, "out")?;
    let tok = load_tokenizer(cfg)?;
    let (mc, tc) = cfg.revdict_configs(tok.vocab_size())?;
    let glove = load_glove(cfg, &tok, mc.d_model, "revdict.d_model")?;
    let tr = revdict::prepare_examples(&train, &tok, &mc.targets, mc.max_len)?;
    let dv = if dev.is_empty() { Vec::new() } else { revdict::prepare_examples(&dev, &tok, &mc.targets, mc.max_len)? };
    let mut model = RevdictModel::new(mc, &mut RngStream::new(cfg.seed, 0x7264))?;
    model.set_vocab_fingerprint(tok.fingerprint());
    if let Some(t) = &glove {
        model.set_embeddings(t)?;
    }
    let rd = RunDir::create(out, cfg)?;
    tok.save(&rd.path(TOKENIZER_FILE))?;
    let report = revdict::train(&mut model, &tr, &dv, &tc)?;
    model.save(&rd.path("model"))?;
    rd.finish(&report)
}

enum Checkpoint {
    Defmod { main: PathBuf, fallback: Option<PathBuf> },
    Revdict(PathBuf),
}

fn descriptor_format(dir: &Path) -> Result<Option<String>> {
    let p = dir.join(defmod::DESCRIPTOR_FILE);
    if !p.is_file() {
        return Ok(None);
    }
    let v: Value = serde_json::from_str(&read_to_string(&p)?)
        .map_err(|e| Error::format("model descriptor", format!("{}: {e}", p.display())))?;
    Ok(v.get("format").and_then(Value::as_str).map(String::from))
}

/// Accepts a checkpoint directory or a run directory holding `main`
/// (and `fallback`) or `model`.
fn locate(dir: &Path) -> Result<Checkpoint> {
    let classify = |d: &Path| -> Result<Option<Checkpoint>> {
        Ok(match descriptor_format(d)?.as_deref() {
            Some("glosslab-defmod") => Some(Checkpoint::Defmod { main: d.to_path_buf(), fallback: None }),
            Some("glosslab-revdict") => Some(Checkpoint::Revdict(d.to_path_buf())),
            Some(f) => bail!(Error::format("model descriptor", format!("unknown model format {f:?}"))),
            None => None,
        })
    };
    if let Some(c) = classify(dir)? {
        return Ok(c);
    }
    if let Some(Checkpoint::Defmod { main, .. }) = classify(&dir.join("main"))? {
        let fb = dir.join("fallback");
        let fallback = matches!(classify(&fb)?, Some(Checkpoint::Defmod { .. })).then_some(fb);
        return Ok(Checkpoint::Defmod { main, fallback });
    }
    if let Some(c @ Checkpoint::Revdict(_)) = classify(&dir.join("model"))? {
        return Ok(c);
    }
    bail!(Error::config(format!("no model checkpoint found in {}", dir.display())))
}

/// The explicit tokenizer, else the one saved in the run directory.
fn run_tokenizer(model_dir: &Path, explicit: Option<&Path>) -> Result<TokenizerModel> {
    let candidates = [model_dir.join(TOKENIZER_FILE), model_dir.join("..").join(TOKENIZER_FILE)];
    let p = match explicit {
        Some(p) => p.to_path_buf(),
        None => candidates.into_iter().find(|p| p.is_file()).ok_or_else(|| {
            Error::config(format!("no {TOKENIZER_FILE} next to {}; pass --tokenizer", model_dir.display()))
        })?,
    };
    Ok(TokenizerModel::load(&p)?)
}

fn predict(cfg: &RunConfig, model_dir: &Path, input: &Path, out: &Path, tok: Option<&Path>) -> Result<()> {
    let tok = run_tokenizer(model_dir, tok)?;
    match locate(model_dir)? {
        Checkpoint::Defmod { main, fallback } => {
            let opts = LoadOptions { require_gloss: false, require_embedding: true };
            let records = load_dataset_with(input, cfg.language, opts)?;
            let main = DefmodModel::load(&main, Some(&tok))?;
            let fallback = fallback.map(|p| DefmodModel::load(&p, Some(&tok))).transpose()?;
            let width = cfg.defmod.beam_width;
            let dm = Decoder { model: &main, tokenizer: &tok, beam_width: width };
            let df = fallback.as_ref().map(|m| Decoder { model: m, tokenizer: &tok, beam_width: width });
            let (mut used, mut deformed) = (0, 0);
            let mut preds = Vec::with_capacity(records.len());
            for r in &records {
                let g = defmod::generate_with_fallback(
                    &dm,
                    df.as_ref().map(|d| d as &dyn GlossGenerator),
                    &r.id,
                    &r.embeddings,
                )?;
                used += g.used_fallback as usize;
                deformed += g.deformed as usize;
                preds.push(Prediction { id: r.id.clone(), gloss: g.text });
            }
            log::info!("{} glosses generated, {used} from the fallback, {deformed} still deformed", preds.len());
            defmod::save_predictions(out, &preds)?;
        }
        Checkpoint::Revdict(dir) => {
            let opts = LoadOptions { require_gloss: true, require_embedding: false };
            let records = load_dataset_with(input, cfg.language, opts)?;
            let model = RevdictModel::load(&dir, Some(&tok))?;
            let max_len = model.config().max_len;
            let seqs: Vec<Vec<usize>> =
                records.iter().map(|r| revdict::tokenize_gloss(&tok, &r.gloss, max_len)).collect();
            let vectors = model.predict_primary(&seqs, CHUNK)?;
            let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
            revdict::save_predictions(out, model.config().primary, &ids, &vectors)?;
            log::info!("{} vectors predicted", ids.len());
        }
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, predictions: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let rows: Vec<serde_json::Map<String, Value>> = serde_json::from_str(&read_to_string(predictions)?)
        .map_err(|e| Error::format("predictions", format!("{}: {e}", predictions.display())))?;
    if rows.is_empty() {
        bail!(Error::Empty("predictions"));
    }
    let opts = LoadOptions { require_gloss: false, require_embedding: false };
    let refs = load_dataset_with(reference, cfg.language, opts)?;
    let by_id: BTreeMap<&str, &GlossRecord> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let id_of = |row: &serde_json::Map<String, Value>| -> Result<String> {
        let id = row
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format("predictions", "entry without a string id"))?;
        if !by_id.contains_key(id) {
            bail!(Error::validation(id, "prediction id is not in the reference dataset"));
        }
        Ok(id.to_string())
    };
    let lang = cfg.language.code();
    let mut report = MetricReport::default();
    report.metadata.insert("predictions".into(), rows.len().to_string());
    if rows[0].contains_key("gloss") {
        report.metadata.insert("task".into(), "defmod".into());
        let mut refs_by_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for g in transform_dataset(&refs).glosses {
            refs_by_id.entry(g.parent_id).or_default().push(g.text);
        }
        let mut total = 0.0;
        for row in &rows {
            let id = id_of(row)?;
            let cand = row
                .get("gloss")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::validation(&id, "gloss is not a string"))?;
            let rs: Vec<&str> = refs_by_id.get(&id).map(|v| v.iter().map(String::as_str).collect()).unwrap_or_default();
            if rs.is_empty() {
                bail!(Error::validation(&id, "reference has no gloss"));
            }
            total += metrics::bleu_max(&glosslab::corpus::normalize(cand), &rs, 4);
        }
        report.insert(lang, "text", "bleu", total / rows.len() as f64);
    } else {
        report.metadata.insert("task".into(), "revdict".into());
        let kinds: Vec<EmbeddingKind> =
            EmbeddingKind::ALL.into_iter().filter(|k| rows[0].contains_key(k.name())).collect();
        if kinds.is_empty() {
            bail!(Error::format("predictions", "entries carry neither a gloss nor an embedding"));
        }
        for k in kinds {
            let (mut pred, mut gt) = (Vec::new(), Vec::new());
            for row in &rows {
                let id = id_of(row)?;
                let v: Vec<f32> = row
                    .get(k.name())
                    .and_then(|v| serde_json::from_value(v.clone()).ok())
                    .ok_or_else(|| Error::validation(&id, format!("{k} is not an array of numbers")))?;
                let g = by_id[id.as_str()]
                    .embeddings
                    .get(k)
                    .ok_or_else(|| Error::validation(&id, format!("reference has no {k} embedding")))?;
                if v.len() != g.len() {
                    bail!(Error::validation(&id, format!("{k} has {} values, reference has {}", v.len(), g.len())));
                }
                pred.push(v);
                gt.push(g.to_vec());
            }
            report.insert(lang, k.name(), "mse", metrics::mse(&pred, &gt)?);
            report.insert(lang, k.name(), "cos", metrics::cos(&pred, &gt)?);
            report.insert(lang, k.name(), "rnk", metrics::rnk(&pred, &gt)?);
            if pred.len() > 1 {
                report.insert(lang, k.name(), "cka", metrics::cka_linear(&pred, &gt)?);
            }
        }
    }
    print!("{}", report.to_table());
    if let Some(o) = out {
        write_atomic(o, &to_json_bytes(&report.to_json())?)?;
    }
    Ok(())
}

fn stats(cfg: &RunConfig, input: &Path, split: &str, transformed: bool, out: Option<&Path>) -> Result<()> {
    let opts = LoadOptions { require_gloss: false, require_embedding: false };
    let records = load_dataset_with(input, cfg.language, opts)?;
    let glosses: Vec<String> = if transformed {
        atomic_texts(&records)
    } else {
        records.iter().map(|r| r.gloss.clone()).filter(|g| !g.is_empty()).collect()
    };
    let lang = cfg.language.code();
    let mut report = json!({ "language": lang, "split": split, "transformed": transformed });
    if !glosses.is_empty() {
        let s = gloss_stats(&glosses)?;
        println!("{:<5}{:<7}{:>10}{:>10}{:>10}{:>8}{:>8}", "lang", "split", "glosses", "tokens", "dict", "mean", "std");
        println!(
            "{lang:<5}{split:<7}{:>10}{:>10}{:>10}{:>8.2}{:>8.2}",
            s.n_glosses, s.n_tokens, s.dict_size, s.gloss_size.mean, s.gloss_size.std_dev
        );
        report["glosses"] = serde_json::to_value(&s).expect("stats serialise");
    }
    let mut vectors = Vec::new();
    for &k in cfg.language.embedding_kinds() {
        let with: Vec<GlossRecord> = records.iter().filter(|r| r.embeddings.get(k).is_some()).cloned().collect();
        if with.is_empty() {
            continue;
        }
        let v = vector_stats(&with, k)?;
        println!(
            "{lang:<5}{split:<7}{k:<8} n {:>7}  min {:.3}  mean {:.3}  max {:.3}  |min| {:.3}  |mean| {:.3}  |max| {:.3}",
            v.n_vectors, v.min, v.mean, v.max, v.abs_min, v.abs_mean, v.abs_max
        );
        vectors.push(v);
    }
    report["vectors"] = serde_json::to_value(&vectors).expect("stats serialise");
    if let Some(o) = out {
        write_atomic(o, &to_json_bytes(&report)?)?;
    }
    Ok(())
}

fn hyperopt_run(cfg: &RunConfig) -> Result<()> {
    let lang = cfg.language;
    let train = load_dataset(required(&cfg.paths.train, "train")?, lang)?;
    let dev = load_dataset(required(&cfg.paths.dev, "dev")?, lang)?;
    let test = cfg.paths.test.as_ref().map(|p| load_dataset(p, lang)).transpose()?;
    let out = required(&cfg.paths.out, "out")?;
    let tok = load_tokenizer(cfg)?;
    let (base_m, base_t) = cfg.revdict_configs(tok.vocab_size())?;
    let tr = revdict::prepare_examples(&train, &tok, &base_m.targets, base_m.max_len)?;
    let dv = revdict::prepare_examples(&dev, &tok, &base_m.targets, base_m.max_len)?;
    let ts = test.map(|t| revdict::prepare_examples(&t, &tok, &base_m.targets, base_m.max_len)).transpose()?;
    let space = hyperopt::revdict_space();
    let points = cfg.hyperopt.points.unwrap_or(cfg.revdict_preset()?.search_points);
    let rd = RunDir::create(out, cfg)?;
    let search = |layers: usize, heads: usize, history: PathBuf| {
        let opts = BhoOptions {
            n_points: points,
            n_init: cfg.hyperopt.n_init,
            candidates: cfg.hyperopt.candidates,
            seed: cfg.seed,
            history: Some(history),
        };
        hyperopt::bho_run(&space, &opts, |c, seed| {
            let (mut m, mut t) = (base_m.clone(), base_t.clone());
            m.layers = layers;
            m.heads = heads;
            hyperopt::apply_revdict(c, &mut m, &mut t)?;
            t.seed = seed;
            m.validate()?;
            let mut model = RevdictModel::new(m, &mut RngStream::new(seed, 0x7264))?;
            revdict::train(&mut model, &tr, &dv, &t)?;
            let e = revdict::evaluate(&model, &dv, CHUNK)?;
            let mut metrics = BTreeMap::from([("dev_cos".to_string(), e.cos), ("dev_cka".to_string(), e.cka)]);
            if let Some(ts) = &ts {
                let te = revdict::evaluate(&model, ts, CHUNK)?;
                metrics.insert("test_mse".into(), te.mse);
                metrics.insert("test_cos".into(), te.cos);
            }
            Ok(TrialOutcome { objective: e.mse, metrics })
        })
    };
    let report = if cfg.hyperopt.grid {
        let mut runs = BTreeMap::new();
        let g = hyperopt::grid_search(&GRID_VALUES, &GRID_VALUES, |gp: GridPoint| {
            let r = search(gp.layers, gp.heads, rd.path(&format!("grid/l{}_h{}.jsonl", gp.layers, gp.heads)))?;
            let o = r.best.objective.expect("best trial completed");
            runs.insert(format!("l{}_h{}", gp.layers, gp.heads), r.best);
            Ok(o)
        })?;
        json!({ "grid": g, "best_trials": runs })
    } else {
        let r = search(base_m.layers, base_m.heads, rd.path("trials.jsonl"))?;
        json!({ "best": r.best, "best_so_far": r.best_so_far() })
    };
    rd.finish(&report)
}

fn query(cfg: &RunConfig, model_dir: &Path, index: &Path, tok: Option<&Path>, k: usize) -> Result<()> {
    let tok = run_tokenizer(model_dir, tok)?;
    let Checkpoint::Revdict(dir) = locate(model_dir)? else {
        bail!(Error::config("query needs a revdict model"));
    };
    let model = RevdictModel::load(&dir, Some(&tok))?;
    let opts = LoadOptions { require_gloss: false, require_embedding: true };
    let records = load_dataset_with(index, cfg.language, opts)?;
    let idx = RetrievalIndex::build(&records, model.config().primary)?;
    let enc = GlossEncoder { model: &model, tokenizer: &tok };
    log::info!("index of {} {} vectors ready; one definition per line", idx.len(), idx.kind);
    for line in std::io::stdin().lock().lines() {
        let line = line.map_err(|e| Error::io(Path::new("<stdin>"), e))?;
        let q = line.trim();
        if q.is_empty() {
            continue;
        }
        for (rank, h) in revdict::query(&enc, &idx, q, k)?.iter().enumerate() {
            println!("{:>3}  {:>7.4}  {}  ({})", rank + 1, h.cosine, h.label, h.id);
        }
        println!();
    }
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, train: usize, dev: usize, test: usize) -> Result<()> {
    let splits: Vec<(&str, usize)> =
        [("train", train), ("dev", dev), ("test", test)].into_iter().filter(|s| s.1 > 0).collect();
    let data = glosslab::synth::generate(&cfg.synth, &splits)?;
    for (split, records) in &data {
        let p = out.join(format!("{}.{split}.json", cfg.language.code()));
        save_dataset(&p, records)?;
        log::info!("{} records written to {}", records.len(), p.display());
    }
    Ok(())
}
