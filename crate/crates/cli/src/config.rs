//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use glosslab::corpus::{EmbeddingKind, Language};
use glosslab::defmod::{Preset, RnnKind, SeedContextSpec, TrainConfig};
use glosslab::glove::GloveConfig;
use glosslab::revdict::{Aggregation, RevdictConfig, RevdictPreset, RevdictTrainConfig, Scheduler};
use glosslab::synth::SynthConfig;
use glosslab::tokenizer::TrainerConfig;
use glosslab::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub language: Language,
    pub seed: u64,
    pub paths: Paths,
    pub tokenizer: TrainerConfig,
    pub glove: GloveConfig,
    pub defmod: DefmodSection,
    pub revdict: RevdictSection,
    pub hyperopt: HyperoptSection,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            language: Language::En,
            seed: 0,
            paths: Paths::default(),
            tokenizer: TrainerConfig::default(),
            glove: GloveConfig::default(),
            defmod: DefmodSection::default(),
            revdict: RevdictSection::default(),
            hyperopt: HyperoptSection::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub glove: Option<PathBuf>,
    /// Directory holding `{lang}.{split}.json` files, used by `stats`.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefmodSection {
    pub preset: Preset,
    /// Replaces the preset's main seed/context choice.
    pub spec: Option<SeedContextSpec>,
    pub rnn: Option<RnnKind>,
    pub fallback: bool,
    pub hidden: usize,
    pub embed_dim: usize,
    pub dropout_input: f32,
    pub dropout_network: f32,
    pub max_len: usize,
    pub beam_width: usize,
    /// Overrides the preset's epoch cap.
    pub epochs: Option<usize>,
    pub train: TrainConfig,
}

impl Default for DefmodSection {
    fn default() -> Self {
        DefmodSection {
            preset: Preset::V3,
            spec: None,
            rnn: None,
            fallback: true,
            hidden: 512,
            embed_dim: glosslab::corpus::EMBEDDING_DIM,
            dropout_input: 0.1,
            dropout_network: 0.3,
            max_len: 64,
            beam_width: 4,
            epochs: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevdictSection {
    pub preset: String,
    pub target: EmbeddingKind,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub aggregation: Aggregation,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub micro_batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_fraction: f64,
    pub cos_lambda: f32,
}

impl Default for RevdictSection {
    fn default() -> Self {
        let m = RevdictConfig::new(100, EmbeddingKind::Sgns);
        let t = RevdictTrainConfig::default();
        RevdictSection {
            preset: "v1".into(),
            target: EmbeddingKind::Sgns,
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            ff_dim: m.ff_dim,
            dropout: m.dropout,
            aggregation: m.aggregation,
            max_epochs: None,
            batch_size: None,
            micro_batch: t.micro_batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            warmup_fraction: 0.1,
            cos_lambda: t.cos_lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperoptSection {
    /// Defaults to the revdict preset's budget.
    pub points: Option<usize>,
    pub n_init: Option<usize>,
    pub candidates: usize,
    /// Also search layers x heads over {1, 2, 4, 8}, one search per point.
    pub grid: bool,
}

impl Default for HyperoptSection {
    fn default() -> Self {
        HyperoptSection { points: None, n_init: None, candidates: 1024, grid: false }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides and parses the
    /// result strictly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = glosslab::io::read_to_string(p)?;
                text.parse::<toml::Table>().map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            set_dotted(&mut table, o)?;
        }
        for (key, use_instead) in SHADOWED {
            if has_key(&table, key) {
                bail!(Error::config(format!("{key} cannot be set here; use {use_instead}")));
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        // One seed drives every stage.
        cfg.glove.seed = cfg.seed;
        cfg.defmod.train.seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        cfg.synth.language = cfg.language;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises to TOML")
    }

    pub fn revdict_preset(&self) -> Result<RevdictPreset> {
        Ok(RevdictPreset::by_name(&self.revdict.preset)?)
    }

    pub fn revdict_configs(&self, vocab: usize) -> Result<(RevdictConfig, RevdictTrainConfig)> {
        let p = self.revdict_preset()?;
        let r = &self.revdict;
        let mut m = p.model_config(vocab, self.language, r.target);
        m.d_model = r.d_model;
        m.layers = r.layers;
        m.heads = r.heads;
        m.ff_dim = r.ff_dim;
        m.dropout = r.dropout;
        m.aggregation = r.aggregation;
        let mut t = p.train_config();
        if let Some(e) = r.max_epochs {
            t.max_epochs = e;
        }
        if let Some(b) = r.batch_size {
            t.batch_size = b;
        }
        t.micro_batch = r.micro_batch;
        t.lr = r.lr;
        t.weight_decay = r.weight_decay;
        t.cos_lambda = r.cos_lambda;
        t.seed = self.seed;
        if let Scheduler::Cosine { warmup_fraction } = &mut t.scheduler {
            *warmup_fraction = r.warmup_fraction;
        }
        m.validate()?;
        t.validate()?;
        Ok((m, t))
    }

    /// Every input path that is set must name an existing file.
    pub fn check_inputs(&self) -> Result<()> {
        let p = &self.paths;
        for f in [&p.train, &p.dev, &p.test, &p.tokenizer, &p.glove].into_iter().flatten() {
            require_file(f)?;
        }
        if let Some(d) = &p.data {
            if !d.is_dir() {
                bail!(Error::config(format!("data directory {} does not exist", d.display())));
            }
        }
        Ok(())
    }
}

/// Module keys that the run-level settings own.
const SHADOWED: [(&str, &str); 5] = [
    ("glove.seed", "seed"),
    ("defmod.train.seed", "seed"),
    ("synth.seed", "seed"),
    ("synth.language", "language"),
    ("defmod.train.epochs", "defmod.epochs"),
];

fn has_key(table: &toml::Table, dotted: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = dotted.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        match cur.get(*p) {
            Some(toml::Value::Table(t)) => cur = t,
            _ => return false,
        }
    }
    cur.contains_key(parts[parts.len() - 1])
}

/// `a.b.c=value`; the value is parsed as a TOML literal and taken as a
/// string when that fails.
fn set_dotted(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match next {
            toml::Value::Table(t) => t,
            _ => bail!(Error::config(format!("override {key}: {p} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!(Error::config(format!("{} does not exist or is not a file", p.display())));
    }
    Ok(())
}

/// The value of an optional path, or a config error naming the flag.
pub fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!(Error::config(format!("--{flag} is required (or set paths.{flag} in the config)"))),
    }
}
