//! CODWOE-format datasets: loading, gloss transformation and descriptive
//! statistics.

mod labels;
mod stats;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub use labels::LabelRules;
pub use stats::{gloss_stats, vector_stats, CorpusStats, GlossSize, VectorStats};

/// Width of every provided embedding.
pub const EMBEDDING_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Es,
    Fr,
    It,
    Ru,
}

impl Language {
    pub const ALL: [Language; 5] = [Language::En, Language::Es, Language::Fr, Language::It, Language::Ru];

    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Es => "es",
            Language::Fr => "fr",
            Language::It => "it",
            Language::Ru => "ru",
        }
    }

    /// Embedding types shipped for this language; contextual vectors exist
    /// for English, French and Russian only.
    pub fn embedding_kinds(self) -> &'static [EmbeddingKind] {
        match self {
            Language::En | Language::Fr | Language::Ru => &EmbeddingKind::ALL,
            Language::Es | Language::It => &[EmbeddingKind::Sgns, EmbeddingKind::Char],
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Language::ALL
            .into_iter()
            .find(|l| l.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown language {s:?} (expected en, es, fr, it or ru)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Sgns,
    Char,
    Electra,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 3] = [EmbeddingKind::Sgns, EmbeddingKind::Char, EmbeddingKind::Electra];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Sgns => "sgns",
            EmbeddingKind::Char => "char",
            EmbeddingKind::Electra => "electra",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbeddingKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown embedding type {s:?} (expected sgns, char or electra)")))
    }
}

/// The optional embedding triple attached to a gloss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgns: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electra: Option<Vec<f32>>,
}

impl Embeddings {
    pub fn get(&self, kind: EmbeddingKind) -> Option<&[f32]> {
        match kind {
            EmbeddingKind::Sgns => self.sgns.as_deref(),
            EmbeddingKind::Char => self.char.as_deref(),
            EmbeddingKind::Electra => self.electra.as_deref(),
        }
    }

    pub fn set(&mut self, kind: EmbeddingKind, v: Option<Vec<f32>>) {
        match kind {
            EmbeddingKind::Sgns => self.sgns = v,
            EmbeddingKind::Char => self.char = v,
            EmbeddingKind::Electra => self.electra = v,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sgns.is_none() && self.char.is_none() && self.electra.is_none()
    }
}

/// One dataset entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GlossRecord {
    pub id: String,
    pub word: Option<String>,
    pub gloss: String,
    pub embeddings: Embeddings,
    pub language: Language,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    word: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gloss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sgns: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    char: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    electra: Option<Vec<f64>>,
}

/// What a file must contain for each record. Test splits of the shared task
/// carry either glosses only or embeddings only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub require_gloss: bool,
    pub require_embedding: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { require_gloss: true, require_embedding: true }
    }
}

fn check_vector(id: &str, kind: EmbeddingKind, v: Option<Vec<f64>>) -> Result<Option<Vec<f32>>> {
    let Some(v) = v else { return Ok(None) };
    if v.len() != EMBEDDING_DIM {
        return Err(Error::validation(id, format!("{kind} has {} elements, expected {EMBEDDING_DIM}", v.len())));
    }
    let out: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::validation(id, format!("{kind}[{i}] is not a finite 32-bit value")));
    }
    Ok(Some(out))
}

/// Parses a CODWOE JSON array held in memory.
pub fn parse_dataset(text: &str, language: Language, options: LoadOptions) -> Result<Vec<GlossRecord>> {
    let raw: Vec<RawRecord> = serde_json::from_str(text)
        .map_err(|e| Error::Json { offset: io::byte_offset(text, e.line(), e.column()), message: e.to_string() })?;
    raw.into_iter()
        .map(|r| {
            let gloss = r.gloss.unwrap_or_default();
            if options.require_gloss && gloss.trim().is_empty() {
                return Err(Error::validation(&r.id, "gloss is empty"));
            }
            let embeddings = Embeddings {
                sgns: check_vector(&r.id, EmbeddingKind::Sgns, r.sgns)?,
                char: check_vector(&r.id, EmbeddingKind::Char, r.char)?,
                electra: check_vector(&r.id, EmbeddingKind::Electra, r.electra)?,
            };
            if options.require_embedding && embeddings.is_empty() {
                return Err(Error::validation(&r.id, "no embedding present"));
            }
            Ok(GlossRecord { id: r.id, word: r.word, gloss, embeddings, language })
        })
        .collect()
}

/// Loads a train/dev file: every record needs a gloss and an embedding.
pub fn load_dataset(path: &Path, language: Language) -> Result<Vec<GlossRecord>> {
    load_dataset_with(path, language, LoadOptions::default())
}

pub fn load_dataset_with(path: &Path, language: Language, options: LoadOptions) -> Result<Vec<GlossRecord>> {
    let text = io::read_to_string(path)?;
    parse_dataset(&text, language, options)
}

/// Serializes records in the CODWOE schema.
pub fn dataset_to_json(records: &[GlossRecord]) -> Result<Vec<u8>> {
    let to64 = |v: &Option<Vec<f32>>| v.as_ref().map(|v| v.iter().map(|&x| x as f64).collect());
    let raw: Vec<RawRecord> = records
        .iter()
        .map(|r| RawRecord {
            id: r.id.clone(),
            word: r.word.clone(),
            gloss: Some(r.gloss.clone()),
            sgns: to64(&r.embeddings.sgns),
            char: to64(&r.embeddings.char),
            electra: to64(&r.embeddings.electra),
        })
        .collect();
    let mut out = serde_json::to_vec(&raw).map_err(|e| Error::format("json", e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[GlossRecord]) -> Result<()> {
    io::write_atomic(path, &dataset_to_json(records)?)
}

/// Splits a multi-definition gloss on ";", trimming and dropping empties.
pub fn split_atomic(gloss: &str) -> Vec<&str> {
    gloss.split(';').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Removes one leading lexicographic label using the builtin rule table.
/// English glosses pass through unchanged.
pub fn strip_label(gloss: &str, language: Language) -> &str {
    LabelRules::builtin().strip(gloss, language)
}

const TRAILING: [char; 6] = ['.', ',', ';', ':', '!', '?'];

/// Lowercases and removes trailing sentence punctuation (and the whitespace
/// it may leave behind).
pub fn normalize(gloss: &str) -> String {
    let lower = gloss.trim().to_lowercase();
    lower.trim_end_matches(|c: char| TRAILING.contains(&c) || c.is_whitespace()).to_string()
}

/// One definition after transformation, carrying its parent's embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicGloss {
    pub parent_id: String,
    pub text: String,
    pub embeddings: Embeddings,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    LabelStripped,
    Split(usize),
    DroppedSegment,
    DroppedRecord,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::LabelStripped => f.write_str("label_stripped"),
            Action::Split(n) => write!(f, "split {n}"),
            Action::DroppedSegment => f.write_str("dropped_empty_segment"),
            Action::DroppedRecord => f.write_str("dropped_record"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub id: String,
    pub action: Action,
}

#[derive(Debug, Clone, Default)]
pub struct Transformed {
    pub glosses: Vec<AtomicGloss>,
    pub log: Vec<LogEntry>,
    /// Segments that became empty after label stripping and normalization.
    pub dropped_segments: usize,
}

impl Transformed {
    /// Line-oriented log: `id<TAB>action`.
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&e.id);
            s.push('\t');
            s.push_str(&e.action.to_string());
            s.push('\n');
        }
        s
    }

    /// Atomic glosses as records again, keeping the parent id.
    pub fn to_records(&self, language: Language) -> Vec<GlossRecord> {
        self.glosses
            .iter()
            .map(|g| GlossRecord {
                id: g.parent_id.clone(),
                word: None,
                gloss: g.text.clone(),
                embeddings: g.embeddings.clone(),
                language,
            })
            .collect()
    }
}

/// Label stripping and normalization repeated until nothing changes, so a
/// segment that carried several stacked labels ends up clean.
fn clean_segment(segment: &str, language: Language, stripped: &mut bool) -> String {
    let mut cur = segment.to_string();
    loop {
        let s = strip_label(&cur, language);
        if s.len() != cur.trim_start().len() {
            *stripped = true;
        }
        let next = normalize(s);
        if next == cur {
            return next;
        }
        cur = next;
    }
}

/// Label stripping, splitting on ";" and normalization, in that order.
pub fn transform_dataset(records: &[GlossRecord]) -> Transformed {
    let mut out = Transformed::default();
    for r in records {
        let mut stripped = false;
        let whole = strip_label(&r.gloss, r.language);
        if whole.len() != r.gloss.trim_start().len() {
            stripped = true;
        }
        let segments = split_atomic(whole);
        let mut kept = 0;
        for seg in &segments {
            let text = clean_segment(seg, r.language, &mut stripped);
            if text.is_empty() {
                out.dropped_segments += 1;
                out.log.push(LogEntry { id: r.id.clone(), action: Action::DroppedSegment });
                continue;
            }
            kept += 1;
            out.glosses.push(AtomicGloss { parent_id: r.id.clone(), text, embeddings: r.embeddings.clone() });
        }
        if stripped {
            out.log.push(LogEntry { id: r.id.clone(), action: Action::LabelStripped });
        }
        if kept > 1 {
            out.log.push(LogEntry { id: r.id.clone(), action: Action::Split(kept) });
        }
        if kept == 0 {
            log::warn!("record {} has no atomic gloss after transformation; skipped", r.id);
            out.log.push(LogEntry { id: r.id.clone(), action: Action::DroppedRecord });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, gloss: &str, lang: Language) -> GlossRecord {
        GlossRecord {
            id: id.into(),
            word: None,
            gloss: gloss.into(),
            embeddings: Embeddings { sgns: Some(vec![0.5; EMBEDDING_DIM]), ..Default::default() },
            language: lang,
        }
    }

    #[test]
    fn load_one_entry() {
        let zeros = vec!["0"; 256].join(",");
        let text = format!(r#"[{{"id":"x.1","gloss":"a fool","sgns":[{zeros}]}}]"#);
        let recs = parse_dataset(&text, Language::En, LoadOptions::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].embeddings.sgns.as_ref().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn wrong_length_names_record() {
        let zeros = vec!["0"; 255].join(",");
        let text = format!(r#"[{{"id":"x.1","gloss":"a fool","sgns":[{zeros}]}}]"#);
        let err = parse_dataset(&text, Language::En, LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("x.1"));
        assert!(err.is_validation());
    }

    #[test]
    fn non_finite_rejected() {
        let mut v = vec!["0".to_string(); 256];
        v[3] = "1e300".into();
        let text = format!(r#"[{{"id":"y","gloss":"g","char":[{}]}}]"#, v.join(","));
        let err = parse_dataset(&text, Language::En, LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("char[3]"));
    }

    #[test]
    fn malformed_json_offset() {
        let text = "[\n{\"id\": \"a\", \"gloss\": }]";
        match parse_dataset(text, Language::En, LoadOptions::default()) {
            Err(Error::Json { offset, .. }) => assert_eq!(&text[offset..offset + 1], "}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_atomic("a fool; an idiot"), vec!["a fool", "an idiot"]);
        assert_eq!(split_atomic("a fool"), vec!["a fool"]);
        assert!(split_atomic("; ;").is_empty());
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_label("(Géographie) rivière", Language::Fr), "rivière");
        assert_eq!(strip_label("(Geography) river", Language::En), "(Geography) river");
        assert_eq!(strip_label("rivière", Language::Fr), "rivière");
        assert_eq!(strip_label("устар. то же, что вода", Language::Ru), "то же, что вода");
        // only one label per call
        assert_eq!(strip_label("(Histoire) (Marine) navire", Language::Fr), "(Marine) navire");
        // long parentheticals are content, not labels
        let long = "(one two three four five six seven) x";
        assert_eq!(strip_label(long, Language::Es), long);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("A fool."), "a fool");
        assert_eq!(normalize("Río Grande"), "río grande");
        assert_eq!(normalize("what?!"), "what");
        assert_eq!(normalize("a, b. c"), "a, b. c");
    }

    #[test]
    fn transform_shares_vectors() {
        let t = transform_dataset(&[rec("r", "a fool; an idiot", Language::En)]);
        assert_eq!(t.glosses.len(), 2);
        assert_eq!(t.glosses[0].embeddings, t.glosses[1].embeddings);
        assert_eq!(t.glosses[0].text, "a fool");
    }

    #[test]
    fn transform_stacked_labels_and_drops() {
        let recs = [
            rec("a", "(Histoire) (Marine) Navire de guerre.; (Figuré) Personne", Language::Fr),
            rec("b", ";", Language::Fr),
            rec("c", "(Géographie)", Language::Fr),
        ];
        let t = transform_dataset(&recs);
        let texts: Vec<&str> = t.glosses.iter().map(|g| g.text.as_str()).collect();
        assert_eq!(texts, vec!["navire de guerre", "personne"]);
        assert!(t.log.contains(&LogEntry { id: "b".into(), action: Action::DroppedRecord }));
        assert!(t.log.contains(&LogEntry { id: "c".into(), action: Action::DroppedRecord }));
        assert!(t.log_text().contains("a\tsplit 2\n"));
    }

    #[test]
    fn json_round_trip() {
        let recs = vec![rec("a", "x y", Language::It)];
        let bytes = dataset_to_json(&recs).unwrap();
        let back = parse_dataset(std::str::from_utf8(&bytes).unwrap(), Language::It, LoadOptions::default()).unwrap();
        assert_eq!(back, recs);
    }
}
