use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::dialogue::Speaker;
use super::UtterancePair;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIAL_COUNT: usize = 4;
pub const SPECIAL_TOKENS: [&str; SPECIAL_COUNT] = ["<pad>", "<unk>", "<bos>", "<eos>"];

pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MAX_SIZE: usize = 20_000;

/// Role-specific token ↔ id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    role: Speaker,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-special tokens in id order.
    pub fn from_tokens(role: Speaker, words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len() as u32);
            tokens.push(w);
        }
        Self { role, tokens, index }
    }

    pub fn role(&self) -> Speaker {
        self.role
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of a token; out-of-vocabulary tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string()).collect()
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIAL_COUNT..]
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_COUNT
    }

    /// One token per line; line `k` holds id `k + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.words().join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, role: Speaker) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(role, text.lines().filter(|l| !l.is_empty()).map(str::to_string)))
    }
}

/// Frequency-filtered vocabulary for one role: tokens with count ≥
/// `min_freq`, the `max_size` most frequent kept (ties lexicographic).
pub fn build_vocabulary(
    pairs: &[UtterancePair],
    role: Speaker,
    min_freq: usize,
    max_size: usize,
) -> Result<Vocabulary> {
    if pairs.is_empty() {
        return Err(Error::Empty("cannot build a vocabulary from zero pairs".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        let seq = match role {
            Speaker::Customer => &p.x,
            Speaker::Agent => &p.y,
        };
        for t in seq {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> =
        counts.into_iter().filter(|&(t, c)| c >= min_freq && !SPECIAL_TOKENS.contains(&t)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(max_size);
    Ok(Vocabulary::from_tokens(role, kept.into_iter().map(|(t, _)| t.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(x: &str) -> UtterancePair {
        UtterancePair {
            x: x.split(' ').map(str::to_string).collect(),
            y: vec!["ok".into()],
            dialogue_id: "d".into(),
            turn_index: 0,
        }
    }

    #[test]
    fn min_freq_filters() {
        let v = build_vocabulary(&[pair("a a b")], Speaker::Customer, 2, 100).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.size(), 5);
        let v = build_vocabulary(&[pair("a a b")], Speaker::Customer, 1, 100).unwrap();
        assert_eq!(v.size(), 6);
    }

    #[test]
    fn max_size_keeps_most_frequent() {
        let v = build_vocabulary(&[pair("b a a c c")], Speaker::Customer, 1, 1).unwrap();
        assert_eq!(v.words(), ["a"]);
    }

    #[test]
    fn roles_are_independent() {
        let v = build_vocabulary(&[pair("a a b")], Speaker::Agent, 1, 100).unwrap();
        assert_eq!(v.words(), ["ok"]);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(build_vocabulary(&[], Speaker::Agent, 1, 10).is_err());
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::from_tokens(Speaker::Customer, ["x".to_string()]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("x"), 4);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("customer.vocab");
        let v = Vocabulary::from_tokens(Speaker::Customer, ["b".to_string(), "a".to_string()]);
        v.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "b\na\n");
        assert_eq!(Vocabulary::load(&path, Speaker::Customer).unwrap(), v);
    }

    proptest! {
        #[test]
        fn ids_round_trip_and_oov_is_unk(words in prop::collection::btree_set("[a-z]{1,6}", 1..40), probe in "[0-9]{1,4}") {
            let v = Vocabulary::from_tokens(Speaker::Agent, words.iter().cloned());
            for id in 0..v.size() as u32 {
                prop_assert_eq!(v.id(v.token(id).unwrap()), id);
            }
            prop_assert_eq!(v.id(&probe), UNK);
        }
    }
}
