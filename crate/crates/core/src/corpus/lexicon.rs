//! Rule-based list of factual tokens (numbers, times, codes, gazetteer
//! entries) used by the summarizer's partial copy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::UtterancePair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactRule {
    Time,
    Numeric,
    AlphanumericCode,
    Gazetteer,
}

impl FactRule {
    pub fn as_str(self) -> &'static str {
        match self {
            FactRule::Time => "time",
            FactRule::Numeric => "numeric",
            FactRule::AlphanumericCode => "alphanumeric-code",
            FactRule::Gazetteer => "gazetteer",
        }
    }
}

impl fmt::Display for FactRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FactRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(FactRule::Time),
            "numeric" => Ok(FactRule::Numeric),
            "alphanumeric-code" => Ok(FactRule::AlphanumericCode),
            "gazetteer" => Ok(FactRule::Gazetteer),
            other => Err(Error::InvalidArgument(format!("unknown lexicon rule {other:?}"))),
        }
    }
}

/// Which classifiers are active. All four are on by default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconRules {
    pub time: bool,
    pub numeric: bool,
    pub alphanumeric_code: bool,
    pub code_min_len: usize,
    pub gazetteer: BTreeSet<String>,
}

impl Default for LexiconRules {
    fn default() -> Self {
        Self { time: true, numeric: true, alphanumeric_code: true, code_min_len: 6, gazetteer: BTreeSet::new() }
    }
}

impl LexiconRules {
    pub fn with_gazetteer(gazetteer: BTreeSet<String>) -> Self {
        Self { gazetteer, ..Self::default() }
    }

    /// First matching rule, checked in the order time, numeric, code, gazetteer.
    pub fn classify(&self, token: &str) -> Option<FactRule> {
        if self.time && is_time(token) {
            Some(FactRule::Time)
        } else if self.numeric && is_numeric(token) {
            Some(FactRule::Numeric)
        } else if self.alphanumeric_code && is_code(token, self.code_min_len) {
            Some(FactRule::AlphanumericCode)
        } else if self.gazetteer.contains(token) {
            Some(FactRule::Gazetteer)
        } else {
            None
        }
    }
}

/// `H:MM` or `HH:MM` on a 24-hour clock.
fn is_time(token: &str) -> bool {
    let Some((h, m)) = token.split_once(':') else {
        return false;
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !(digits(h) && digits(m) && (1..=2).contains(&h.len()) && m.len() == 2) {
        return false;
    }
    h.parse::<u32>().is_ok_and(|h| h < 24) && m.parse::<u32>().is_ok_and(|m| m < 60)
}

/// Digit runs optionally joined by single `.`, `/`, `,`, `:` or `-`.
fn is_numeric(token: &str) -> bool {
    let bytes = token.as_bytes();
    if bytes.is_empty() || !bytes[0].is_ascii_digit() || !bytes[bytes.len() - 1].is_ascii_digit() {
        return false;
    }
    let mut prev_sep = false;
    for &b in bytes {
        if b.is_ascii_digit() {
            prev_sep = false;
        } else if matches!(b, b'.' | b'/' | b',' | b':' | b'-') && !prev_sep {
            prev_sep = true;
        } else {
            return false;
        }
    }
    true
}

fn is_code(token: &str, min_len: usize) -> bool {
    token.chars().count() >= min_len
        && token.chars().any(|c| c.is_ascii_alphabetic())
        && token.chars().any(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FactualLexicon {
    entries: BTreeMap<String, FactRule>,
}

impl FactualLexicon {
    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    pub fn rule(&self, token: &str) -> Option<FactRule> {
        self.entries.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, FactRule)> {
        self.entries.iter().map(|(t, r)| (t.as_str(), *r))
    }

    pub fn insert(&mut self, token: impl Into<String>, rule: FactRule) {
        self.entries.insert(token.into(), rule);
    }

    /// `token<TAB>rule` per line, sorted by token.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text: String = self.entries.iter().map(|(t, r)| format!("{t}\t{r}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Self::default();
        for (index, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (token, rule) = line
                .split_once('\t')
                .ok_or_else(|| Error::MalformedRecord { index, message: "expected token<TAB>rule".into() })?;
            lex.insert(token, rule.parse()?);
        }
        Ok(lex)
    }
}

pub fn extract_factual_lexicon(pairs: &[UtterancePair], rules: &LexiconRules) -> FactualLexicon {
    let mut lex = FactualLexicon::default();
    for token in pairs.iter().flat_map(|p| p.x.iter().chain(&p.y)) {
        if lex.contains(token) {
            continue;
        }
        if let Some(rule) = rules.classify(token) {
            lex.insert(token.clone(), rule);
        }
    }
    log::debug!("factual lexicon: {} entries", lex.len());
    lex
}

pub fn load_gazetteer(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_lowercase).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_examples() {
        let rules = LexiconRules::default();
        assert_eq!(rules.classify("qnvdz4rt"), Some(FactRule::AlphanumericCode));
        assert_eq!(rules.classify("13:45"), Some(FactRule::Time));
        assert_eq!(rules.classify("hotel"), None);
        assert_eq!(rules.classify("156"), Some(FactRule::Numeric));
        assert_eq!(rules.classify("01223-365"), Some(FactRule::Numeric));
        assert_eq!(rules.classify("3.5"), Some(FactRule::Numeric));
        assert_eq!(rules.classify("25:99"), Some(FactRule::Numeric));
        assert_eq!(rules.classify("ab12"), None);
        assert_eq!(rules.classify("1..2"), None);
        let gaz = LexiconRules::with_gazetteer(["cambridge".to_string()].into());
        assert_eq!(gaz.classify("cambridge"), Some(FactRule::Gazetteer));
    }

    #[test]
    fn extraction_is_deterministic_and_idempotent() {
        let pairs = vec![UtterancePair {
            x: vec!["at".into(), "13:45".into(), "for".into(), "2".into()],
            y: vec!["ref".into(), "qnvdz4rt".into(), "hotel".into()],
            dialogue_id: "d".into(),
            turn_index: 0,
        }];
        let rules = LexiconRules::default();
        let a = extract_factual_lexicon(&pairs, &rules);
        let b = extract_factual_lexicon(&pairs, &rules);
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|(t, _)| t).collect::<Vec<_>>(), ["13:45", "2", "qnvdz4rt"]);
        for (t, r) in a.iter() {
            assert_eq!(rules.classify(t), Some(r));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lexicon.tsv");
        let mut lex = FactualLexicon::default();
        lex.insert("13:45", FactRule::Time);
        lex.insert("cb41da", FactRule::AlphanumericCode);
        lex.save(&path).unwrap();
        assert_eq!(FactualLexicon::load(&path).unwrap(), lex);
    }
}
