//! Unigram-language-model subword tokenizer.
//!
//! Spaces are mapped to the meta symbol `▁`, which starts every word-initial
//! piece after the first word, so decoding is a plain concatenation followed
//! by the reverse mapping.

mod lattice;
mod train;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;

pub use train::{train, TrainReport, TrainerConfig};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Word-boundary meta symbol.
pub const SPACE: char = '▁';
/// What an unknown piece decodes to.
pub const UNK_SURFACE: &str = "⁇";
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

const MAGIC: &str = "glosslab-unigram";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    pieces: Vec<Piece>,
    index: HashMap<String, usize>,
    max_piece_chars: usize,
    char_coverage: f64,
    unk_logprob: f64,
}

/// Maps spaces to the meta symbol.
pub fn to_internal(text: &str) -> String {
    text.replace(' ', &SPACE.to_string())
}

impl TokenizerModel {
    /// Builds a model from explicit pieces; ids follow the given order after
    /// the specials.
    pub fn from_pieces(pieces: Vec<Piece>, char_coverage: f64) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut max_piece_chars = 1;
        for (i, p) in pieces.iter().enumerate() {
            if p.text.is_empty() {
                return Err(Error::format("tokenizer model", "empty piece"));
            }
            if !p.logprob.is_finite() || p.logprob > 0.0 {
                return Err(Error::format(
                    "tokenizer model",
                    format!("piece {:?} has log-probability {}", p.text, p.logprob),
                ));
            }
            if index.insert(p.text.clone(), i + NUM_SPECIALS).is_some() {
                return Err(Error::format("tokenizer model", format!("duplicate piece {:?}", p.text)));
            }
            max_piece_chars = max_piece_chars.max(p.text.chars().count());
        }
        let min = pieces.iter().map(|p| p.logprob).fold(0.0f64, f64::min);
        Ok(TokenizerModel { pieces, index, max_piece_chars, char_coverage, unk_logprob: min - 10.0 })
    }

    /// Number of ids including the specials.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len() + NUM_SPECIALS
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn char_coverage(&self) -> f64 {
        self.char_coverage
    }

    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    /// Surface form of an id; specials use their bracketed names.
    pub fn id_to_piece(&self, id: usize) -> &str {
        if id < NUM_SPECIALS {
            SPECIAL_NAMES[id]
        } else {
            &self.pieces[id - NUM_SPECIALS].text
        }
    }

    /// Log-probability of a piece id; the unknown token carries a fixed penalty.
    pub fn logprob(&self, id: usize) -> f64 {
        if id == UNK {
            self.unk_logprob
        } else if id < NUM_SPECIALS {
            f64::NEG_INFINITY
        } else {
            self.pieces[id - NUM_SPECIALS].logprob
        }
    }

    fn lookup(&self, s: &str) -> Option<(usize, f64)> {
        self.index.get(s).map(|&id| (id, self.pieces[id - NUM_SPECIALS].logprob))
    }

    /// Maximum-likelihood segmentation. No bos/eos are added.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let t = to_internal(text);
        lattice::viterbi(&t, self.max_piece_chars, self.unk_logprob, |s| self.lookup(s))
            .into_iter()
            .map(|seg| seg.id.unwrap_or(UNK))
            .collect()
    }

    /// Pieces of the best segmentation, for inspection.
    pub fn encode_pieces(&self, text: &str) -> Vec<String> {
        let t = to_internal(text);
        lattice::viterbi(&t, self.max_piece_chars, self.unk_logprob, |s| self.lookup(s))
            .into_iter()
            .map(|seg| t[seg.start..seg.end].to_string())
            .collect()
    }

    /// Samples a segmentation with probability proportional to its
    /// likelihood raised to `alpha` (subword regularization).
    pub fn encode_sample(&self, text: &str, alpha: f64, rng: &mut RngStream) -> Vec<usize> {
        let t = to_internal(text);
        lattice::sample(&t, self.max_piece_chars, self.unk_logprob, alpha, rng, |s| self.lookup(s))
            .into_iter()
            .map(|seg| seg.id.unwrap_or(UNK))
            .collect()
    }

    /// Sum of piece log-probabilities of a segmentation.
    pub fn score(&self, ids: &[usize]) -> f64 {
        ids.iter().map(|&id| self.logprob(id)).sum()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                UNK => out.push_str(UNK_SURFACE),
                PAD | BOS | EOS => {}
                _ => match self.pieces.get(id - NUM_SPECIALS) {
                    Some(p) => out.push_str(&p.text),
                    None => out.push_str(UNK_SURFACE),
                },
            }
        }
        out.replace(SPACE, " ")
    }

    /// Versioned text form: a header block followed by `piece<TAB>logprob`
    /// lines. Log-probabilities are written in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC} {VERSION}");
        let _ = writeln!(s, "vocab_size {}", self.vocab_size());
        let _ = writeln!(s, "char_coverage {:?}", self.char_coverage);
        let _ = writeln!(s, "specials {}", SPECIAL_NAMES.join(" "));
        let _ = writeln!(s, "unk_surface {UNK_SURFACE}");
        s.push('\n');
        for p in &self.pieces {
            let _ = writeln!(s, "{}\t{:?}", escape(&p.text), p.logprob);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("tokenizer model", m);
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("{MAGIC} {VERSION}") {
            return Err(bad(format!("unrecognised header {header:?}")));
        }
        let mut vocab_size = None;
        let mut coverage = 1.0;
        for line in lines.by_ref() {
            if line.is_empty() {
                break;
            }
            let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            match key {
                "vocab_size" => vocab_size = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "char_coverage" => coverage = value.parse::<f64>().map_err(|e| bad(e.to_string()))?,
                "specials" => {
                    if value != SPECIAL_NAMES.join(" ") {
                        return Err(bad(format!("unsupported specials {value:?}")));
                    }
                }
                "unk_surface" => {}
                _ => return Err(bad(format!("unknown header key {key:?}"))),
            }
        }
        let mut pieces = Vec::new();
        for (n, line) in lines.enumerate() {
            let (p, lp) = line.rsplit_once('\t').ok_or_else(|| bad(format!("piece line {} has no tab", n + 1)))?;
            let logprob = lp.parse::<f64>().map_err(|e| bad(format!("piece line {}: {e}", n + 1)))?;
            pieces.push(Piece { text: unescape(p)?, logprob });
        }
        let model = TokenizerModel::from_pieces(pieces, coverage)?;
        if Some(model.vocab_size()) != vocab_size {
            return Err(bad(format!("header declares {vocab_size:?} entries, file has {}", model.vocab_size())));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        TokenizerModel::from_text(&io::read_to_string(path)?)
    }

    /// Hex SHA-256 of the model file, used to tie checkpoints to a vocabulary.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

pub(crate) fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(Error::format("tokenizer model", format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}
