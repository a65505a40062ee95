use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use super::Language;

const RULES: &str = include_str!("label_rules.toml");

#[derive(Deserialize)]
struct RuleSet {
    patterns: Vec<String>,
}

/// Compiled per-language label rules; English has none.
pub struct LabelRules {
    by_language: HashMap<Language, Vec<Regex>>,
}

impl LabelRules {
    pub fn parse(text: &str) -> crate::Result<Self> {
        let table: HashMap<String, RuleSet> =
            toml::from_str(text).map_err(|e| crate::Error::format("label rules", e.to_string()))?;
        let compile = |p: &str| Regex::new(p).map_err(|e| crate::Error::format("label rule", format!("{p}: {e}")));
        let default: Vec<Regex> = match table.get("default") {
            Some(set) => set.patterns.iter().map(|p| compile(p)).collect::<crate::Result<_>>()?,
            None => Vec::new(),
        };
        let mut by_language = HashMap::new();
        for lang in Language::ALL {
            if lang == Language::En {
                continue;
            }
            let mut rules = default.clone();
            if let Some(set) = table.get(lang.code()) {
                for p in &set.patterns {
                    rules.push(compile(p)?);
                }
            }
            by_language.insert(lang, rules);
        }
        for key in table.keys() {
            if key != "default" && key.parse::<Language>().is_err() {
                return Err(crate::Error::format("label rules", format!("unknown language table {key:?}")));
            }
        }
        Ok(LabelRules { by_language })
    }

    /// The rule table shipped with the crate.
    pub fn builtin() -> &'static LabelRules {
        static RULES_CELL: OnceLock<LabelRules> = OnceLock::new();
        RULES_CELL.get_or_init(|| LabelRules::parse(RULES).expect("builtin label rules are valid"))
    }

    /// Removes at most one leading label, then leading whitespace.
    pub fn strip<'a>(&self, gloss: &'a str, language: Language) -> &'a str {
        let Some(rules) = self.by_language.get(&language) else {
            return gloss;
        };
        let text = gloss.trim_start();
        for re in rules {
            if let Some(m) = re.find(text) {
                return text[m.end()..].trim_start();
            }
        }
        text
    }
}
