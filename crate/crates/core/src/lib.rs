//! Definition modeling (embedding to gloss) and reverse dictionary (gloss to
//! embedding) models, with the data preparation, subword tokenization,
//! embedding pretraining, hyperparameter search and evaluation they need.

pub mod corpus;
pub mod defmod;
pub mod error;
pub mod glove;
pub mod hyperopt;
pub mod io;
pub mod metrics;
pub mod revdict;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
