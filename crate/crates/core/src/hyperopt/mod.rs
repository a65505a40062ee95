//! Hyperparameter search: a size grid and GP-guided Bayesian optimisation.

mod gp;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::revdict::{RevdictConfig, RevdictTrainConfig, Scheduler};
use crate::rng::RngStream;

pub use gp::{expected_improvement, GpSurrogate, Kernel, JITTER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Domain {
    Continuous {
        lo: f64,
        hi: f64,
        #[serde(default)]
        log: bool,
    },
    Categorical {
        values: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Choice(String),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            Value::Choice(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v:.6e}"),
            Value::Choice(s) => f.write_str(s),
        }
    }
}

pub type Configuration = BTreeMap<String, Value>;

/// Named dimensions. Each maps to one coordinate of the unit cube; log
/// dimensions are interpolated in log space and a categorical value `i` of
/// `n` sits at `(i + 0.5) / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        let s = SearchSpace { dims };
        s.validate()?;
        Ok(s)
    }

    pub fn continuous(name: &str, lo: f64, hi: f64, log: bool) -> Dimension {
        Dimension { name: name.into(), domain: Domain::Continuous { lo, hi, log } }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("search space has no dimensions"));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.dims {
            if !names.insert(d.name.as_str()) {
                return Err(Error::config(format!("dimension {} appears twice", d.name)));
            }
            match &d.domain {
                Domain::Continuous { lo, hi, log } => {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::config(format!("dimension {} needs finite lo < hi", d.name)));
                    }
                    if *log && *lo <= 0.0 {
                        return Err(Error::config(format!("log dimension {} needs lo > 0", d.name)));
                    }
                }
                Domain::Categorical { values } if values.is_empty() => {
                    return Err(Error::config(format!("categorical dimension {} has no values", d.name)));
                }
                Domain::Categorical { .. } => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Maps a unit-cube point to a configuration, and returns the point
    /// snapped to what the configuration actually represents.
    pub fn decode(&self, u: &[f64]) -> (Configuration, Vec<f64>) {
        let mut cfg = Configuration::new();
        let mut snapped = Vec::with_capacity(u.len());
        for (d, &x) in self.dims.iter().zip(u) {
            let x = x.clamp(0.0, 1.0);
            match &d.domain {
                Domain::Continuous { lo, hi, log } => {
                    let v = if *log { (lo.ln() + x * (hi.ln() - lo.ln())).exp() } else { lo + x * (hi - lo) };
                    cfg.insert(d.name.clone(), Value::Real(v.clamp(*lo, *hi)));
                    snapped.push(x);
                }
                Domain::Categorical { values } => {
                    let n = values.len();
                    let i = ((x * n as f64) as usize).min(n - 1);
                    cfg.insert(d.name.clone(), Value::Choice(values[i].clone()));
                    snapped.push((i as f64 + 0.5) / n as f64);
                }
            }
        }
        (cfg, snapped)
    }

    /// Inverse of [`decode`](Self::decode); fails on missing names or
    /// out-of-range values.
    pub fn encode(&self, cfg: &Configuration) -> Result<Vec<f64>> {
        self.dims
            .iter()
            .map(|d| {
                let v = cfg.get(&d.name).ok_or_else(|| Error::config(format!("configuration lacks {}", d.name)))?;
                match (&d.domain, v) {
                    (Domain::Continuous { lo, hi, log }, Value::Real(x)) if (lo..=hi).contains(&x) => {
                        Ok(if *log { (x.ln() - lo.ln()) / (hi.ln() - lo.ln()) } else { (x - lo) / (hi - lo) })
                    }
                    (Domain::Categorical { values }, Value::Choice(s)) => values
                        .iter()
                        .position(|c| c == s)
                        .map(|i| (i as f64 + 0.5) / values.len() as f64)
                        .ok_or_else(|| Error::config(format!("{s} is not a value of {}", d.name))),
                    _ => Err(Error::config(format!("{v} is outside dimension {}", d.name))),
                }
            })
            .collect()
    }
}

/// The revdict training knobs searched per preset: learning rate, dropout,
/// warmup share and weight decay.
pub fn revdict_space() -> SearchSpace {
    SearchSpace {
        dims: vec![
            SearchSpace::continuous("lr", 1e-5, 1e-2, true),
            SearchSpace::continuous("dropout", 0.0, 0.5, false),
            SearchSpace::continuous("warmup_fraction", 0.0, 0.3, false),
            SearchSpace::continuous("weight_decay", 1e-4, 1e-1, true),
        ],
    }
}

/// Writes a configuration from [`revdict_space`] into model and training
/// configs. Unknown names are an error; warmup only affects the cosine
/// scheduler.
pub fn apply_revdict(cfg: &Configuration, model: &mut RevdictConfig, train: &mut RevdictTrainConfig) -> Result<()> {
    for (k, v) in cfg {
        let x = v.as_real().ok_or_else(|| Error::config(format!("{k} must be numeric")))?;
        match k.as_str() {
            "lr" => train.lr = x as f32,
            "dropout" => model.dropout = x as f32,
            "weight_decay" => train.weight_decay = x as f32,
            "warmup_fraction" => {
                if let Scheduler::Cosine { warmup_fraction } = &mut train.scheduler {
                    *warmup_fraction = x;
                }
            }
            _ => return Err(Error::config(format!("revdict has no searchable parameter {k}"))),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Failed { message: String },
}

/// What a trainer reports for one configuration. `objective` is minimised;
/// `metrics` holds anything else worth keeping, e.g. a test score next to
/// the dev score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialOutcome {
    pub objective: f64,
    pub metrics: BTreeMap<String, f64>,
}

impl From<f64> for TrialOutcome {
    fn from(objective: f64) -> Self {
        TrialOutcome { objective, metrics: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: Configuration,
    /// Unit-cube coordinates of `config`.
    pub point: Vec<f64>,
    pub objective: Option<f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub status: TrialStatus,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl Trial {
    pub fn completed(&self) -> bool {
        self.status == TrialStatus::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhoOptions {
    pub n_points: usize,
    /// Defaults to `min(5, n_points / 3)`, at least 1.
    pub n_init: Option<usize>,
    pub candidates: usize,
    pub seed: u64,
    /// JSON-lines trial log. Existing trials are reused and the search
    /// continues after them.
    pub history: Option<PathBuf>,
}

impl BhoOptions {
    pub fn new(n_points: usize, seed: u64) -> Self {
        BhoOptions { n_points, n_init: None, candidates: 1024, seed, history: None }
    }

    pub fn init_points(&self) -> usize {
        self.n_init.unwrap_or((self.n_points / 3).clamp(1, 5))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BhoResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

impl BhoResult {
    /// Lowest objective among completed trials up to each index; `None`
    /// until the first completed trial.
    pub fn best_so_far(&self) -> Vec<Option<f64>> {
        best_so_far(&self.history)
    }
}

pub fn best_so_far(history: &[Trial]) -> Vec<Option<f64>> {
    let mut best: Option<f64> = None;
    history
        .iter()
        .map(|t| {
            if let (true, Some(o)) = (t.completed(), t.objective) {
                best = Some(best.map_or(o, |b: f64| b.min(o)));
            }
            best
        })
        .collect()
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `i` in `base`.
pub fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Point `i` (from 0) of a Halton sequence shifted modulo 1 by `shift`.
pub fn halton_point(i: u64, shift: &[f64]) -> Vec<f64> {
    assert!(shift.len() <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    shift.iter().zip(PRIMES).map(|(s, p)| (radical_inverse(i, p) + s).fract()).collect()
}

fn load_history(path: &Path, space: &SearchSpace) -> Result<Vec<Trial>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = io::read_to_string(path)?;
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t: Trial = serde_json::from_str(line)
            .map_err(|e| Error::format("trial history", format!("{}:{}: {e}", path.display(), n + 1)))?;
        if t.index != trials.len() {
            return Err(Error::format(
                "trial history",
                format!("{}:{}: expected trial {}", path.display(), n + 1, trials.len()),
            ));
        }
        space
            .encode(&t.config)
            .map_err(|e| Error::format("trial history", format!("{} trial {}: {e}", path.display(), t.index)))?;
        trials.push(t);
    }
    Ok(trials)
}

fn write_history(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut out = Vec::new();
    for t in trials {
        out.extend(serde_json::to_vec(t).expect("trials serialise"));
        out.push(b'\n');
    }
    io::write_atomic(path, &out)
}

fn propose(
    space: &SearchSpace,
    history: &[Trial],
    opts: &BhoOptions,
    index: usize,
    root: &RngStream,
) -> Result<Vec<f64>> {
    let d = space.len();
    if index < opts.init_points() {
        let mut shift_rng = root.split(0);
        let shift: Vec<f64> = (0..d).map(|_| shift_rng.uniform()).collect();
        return Ok(halton_point(index as u64, &shift));
    }
    let mut rng = root.split(index as u64 + 1);
    let done: Vec<&Trial> = history.iter().filter(|t| t.completed()).collect();
    if done.len() < 2 {
        return Ok((0..d).map(|_| rng.uniform()).collect());
    }
    let points: Vec<Vec<f64>> = done.iter().map(|t| t.point.clone()).collect();
    let values: Vec<f64> = done.iter().filter_map(|t| t.objective).collect();
    let gp = GpSurrogate::fit(&points, &values, &mut rng)?;
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut top: Option<(f64, Vec<f64>)> = None;
    for _ in 0..opts.candidates.max(1) {
        let u: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
        let (_, snapped) = space.decode(&u);
        let (mu, var) = gp.predict(&snapped);
        let ei = expected_improvement(mu, var.sqrt(), best);
        if top.as_ref().is_none_or(|(b, _)| ei > *b) {
            top = Some((ei, u));
        }
    }
    Ok(top.map(|(_, u)| u).expect("at least one candidate"))
}

/// Bayesian optimisation: quasi-random initial trials, then the candidate
/// with the highest expected improvement under a GP fitted to the
/// completed trials. A trainer error or non-finite objective fails the
/// trial, which still counts against the budget.
pub fn bho_run<F>(space: &SearchSpace, opts: &BhoOptions, mut trainer: F) -> Result<BhoResult>
where
    F: FnMut(&Configuration, u64) -> Result<TrialOutcome>,
{
    space.validate()?;
    if opts.n_points == 0 || opts.init_points() > opts.n_points {
        return Err(Error::config("need 0 < n_init <= n_points"));
    }
    let root = RngStream::new(opts.seed, 0x0062_686f);
    let mut history = match &opts.history {
        Some(p) => load_history(p, space)?,
        None => Vec::new(),
    };
    if !history.is_empty() {
        log::info!("resuming search after {} recorded trials", history.len());
    }
    while history.len() < opts.n_points {
        let index = history.len();
        let u = propose(space, &history, opts, index, &root)?;
        let (config, point) = space.decode(&u);
        let seed = root.split(0x7472_0000 + index as u64).next_u64();
        let t0 = Instant::now();
        let result = trainer(&config, seed);
        let wall_time_s = t0.elapsed().as_secs_f64();
        let (objective, metrics, status) = match result {
            Ok(o) if o.objective.is_finite() => (Some(o.objective), o.metrics, TrialStatus::Completed),
            Ok(o) => (None, o.metrics, TrialStatus::Failed { message: format!("objective {}", o.objective) }),
            Err(e) => (None, BTreeMap::new(), TrialStatus::Failed { message: e.to_string() }),
        };
        log::info!("trial {index}: {objective:?} ({status:?})");
        history.push(Trial { index, config, point, objective, metrics, status, seed, wall_time_s });
        if let Some(p) = &opts.history {
            write_history(p, &history)?;
        }
    }
    let best = history
        .iter()
        .filter(|t| t.completed())
        .min_by(|a, b| a.objective.partial_cmp(&b.objective).expect("completed objectives are finite"))
        .cloned()
        .ok_or_else(|| Error::Numeric("every trial failed".into()))?;
    Ok(BhoResult { best, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    pub best_objective: f64,
    pub table: Vec<(GridPoint, f64)>,
}

/// Transformer sizes searched by [`grid_search`].
pub const GRID_VALUES: [usize; 4] = [1, 2, 4, 8];

/// Evaluates every (layers, heads) pair. The lowest objective wins; ties go
/// to fewer layers, then fewer heads.
pub fn grid_search<F>(layers: &[usize], heads: &[usize], mut trainer: F) -> Result<GridResult>
where
    F: FnMut(GridPoint) -> Result<f64>,
{
    if layers.is_empty() || heads.is_empty() {
        return Err(Error::config("grid search needs at least one value per dimension"));
    }
    let mut table = Vec::with_capacity(layers.len() * heads.len());
    for &l in layers {
        for &h in heads {
            let p = GridPoint { layers: l, heads: h };
            let v = trainer(p)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("objective {v} at {l} layers, {h} heads")));
            }
            table.push((p, v));
        }
    }
    let &(best, best_objective) =
        table.iter().min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0))).expect("non-empty grid");
    Ok(GridResult { best, best_objective, table })
}
