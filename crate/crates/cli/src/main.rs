use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod rundir;

/// Options shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set revdict.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Language code (en, es, fr, it, ru).
    #[arg(long, global = true)]
    pub lang: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Strip labels, split multi-sense glosses and normalise a dataset.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        /// Output directory for transformed.json and transform.log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the subword tokenizer on a dataset's transformed glosses.
    TokenizerTrain {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train GloVe vectors over tokenized glosses.
    GloveTrain {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the definition model (main and fallback).
    DefmodTrain {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// GloVe vectors used to initialise the token embeddings.
        #[arg(long)]
        glove: Option<PathBuf>,
        /// v3 or v4.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reverse dictionary encoder.
    RevdictTrain {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        glove: Option<PathBuf>,
        /// v1 to v6.
        #[arg(long)]
        preset: Option<String>,
        /// Embedding type to predict (sgns, char, electra).
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write predictions for a dataset with a trained model.
    Predict {
        /// Run directory or checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the tokenizer saved with the run.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Score a prediction file against a reference dataset.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// JSON metric report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gloss and vector statistics of one split.
    Stats {
        /// Dataset file; defaults to `{data}/{lang}.{split}.json`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
        /// Compute statistics after the gloss transformation.
        #[arg(long)]
        transformed: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bayesian search over revdict training hyperparameters.
    Hyperopt {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Scored alongside dev for every trial when given.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        points: Option<usize>,
        /// Repeat the search for every layers x heads pair.
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read definitions from standard input and print the nearest words.
    Query {
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose vectors form the search index.
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Write a synthetic dataset in the CODWOE layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 300)]
        dev: usize,
        #[arg(long, default_value_t = 300)]
        test: usize,
    },
}

#[derive(Debug, Parser)]
#[command(name = "glosslab", version, about = "Definition modeling and reverse dictionary experiments")]
struct Top {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// 1 when any error in the chain is a validation error of the library.
fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e.chain().any(|c| c.downcast_ref::<glosslab::Error>().is_some_and(glosslab::Error::is_validation));
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let top = match Top::try_parse() {
        Ok(t) => t,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&top.common, top.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
