//! Dialogue ingestion, utterance pairing, vocabularies, the factual
//! lexicon, and batching.

mod batch;
mod dialogue;
mod lexicon;
mod tokenize;
mod vocab;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) use batch::group_by_dialogue;
pub use batch::{batch_iterator, Batch, BatchIter};
pub use dialogue::{load_corpus, parse_native, to_native_jsonl, CorpusFormat, Dialogue, Speaker, Turn};
pub use lexicon::{extract_factual_lexicon, load_gazetteer, FactRule, FactualLexicon, LexiconRules};
pub use tokenize::tokenize;
pub use vocab::{
    build_vocabulary, Vocabulary, BOS, DEFAULT_MAX_SIZE, DEFAULT_MIN_FREQ, EOS, PAD, SPECIAL_COUNT, SPECIAL_TOKENS, UNK,
};

/// A customer utterance and the agent utterance that answers it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtterancePair {
    pub x: Vec<String>,
    pub y: Vec<String>,
    pub dialogue_id: String,
    pub turn_index: usize,
}

/// Merges consecutive same-speaker turns, then pairs each customer turn
/// with the agent turn that follows it. Leading agent turns and a trailing
/// unanswered customer turn are dropped.
pub fn pair_utterances(d: &Dialogue) -> Vec<UtterancePair> {
    let mut merged: Vec<Turn> = Vec::with_capacity(d.turns.len());
    for t in &d.turns {
        match merged.last_mut() {
            Some(last) if last.speaker == t.speaker => last.tokens.extend(t.tokens.iter().cloned()),
            _ => merged.push(t.clone()),
        }
    }
    let mut pairs = Vec::new();
    let mut i = usize::from(merged.first().is_some_and(|t| t.speaker == Speaker::Agent));
    while i + 1 < merged.len() {
        pairs.push(UtterancePair {
            x: merged[i].tokens.clone(),
            y: merged[i + 1].tokens.clone(),
            dialogue_id: d.id.clone(),
            turn_index: pairs.len(),
        });
        i += 2;
    }
    pairs
}

pub fn pair_all(dialogues: &[Dialogue]) -> Vec<UtterancePair> {
    dialogues.iter().flat_map(pair_utterances).collect()
}

/// An utterance pair in vocabulary ids (no BOS/EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

pub fn encode_pairs(pairs: &[UtterancePair], customer: &Vocabulary, agent: &Vocabulary) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            dialogue_id: p.dialogue_id.clone(),
            turn_index: p.turn_index,
            x: customer.encode(&p.x),
            y: agent.encode(&p.y),
        })
        .collect()
}

/// Dialogue ids of the train/test/valid partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub valid: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Valid,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "valid" => Ok(Split::Valid),
            other => Err(crate::Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Valid => &self.valid,
        }
    }

    /// Seeded shuffle, then partition. Published dataset sizes
    /// (MultiWOZ 8438/1000/1000, Taskmaster written 6168/770/770) are used
    /// when the corpus holds at least that many dialogues; otherwise an
    /// 80/10/10 split.
    pub fn split(dialogues: &[Dialogue], format: CorpusFormat, seed: u64) -> Self {
        let mut ids: Vec<String> = dialogues.iter().map(|d| d.id.clone()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let published = match format {
            CorpusFormat::MultiWoz => Some((1000, 1000)),
            CorpusFormat::Taskmaster => Some((770, 770)),
            CorpusFormat::Jsonl => None,
        };
        let (test, valid) = match published {
            Some((t, v)) if n > t + v && n >= full_size(format) => (t, v),
            _ => (n / 10, n / 10),
        };
        let valid_ids = ids.split_off(n - valid);
        let test_ids = ids.split_off(n - valid - test);
        Self { train: ids, test: test_ids, valid: valid_ids }
    }
}

fn full_size(format: CorpusFormat) -> usize {
    match format {
        CorpusFormat::MultiWoz => 8438 + 1000 + 1000,
        CorpusFormat::Taskmaster => 6168 + 770 + 770,
        CorpusFormat::Jsonl => 0,
    }
}

/// Selects dialogues by id, in manifest order. Unknown ids are an error.
pub fn select_dialogues(dialogues: &[Dialogue], ids: &[String]) -> crate::Result<Vec<Dialogue>> {
    let by_id: HashMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|d| (*d).clone())
                .ok_or_else(|| crate::Error::Missing(format!("dialogue id {id:?} not in corpus")))
        })
        .collect()
}

/// Sorted label set across dialogues.
pub fn label_set(dialogues: &[Dialogue]) -> Vec<String> {
    dialogues.iter().flat_map(|d| d.domains.iter().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
}
