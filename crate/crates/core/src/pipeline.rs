//! A prepared corpus directory: dialogues, splits, per-role vocabularies
//! and the factual lexicon, built from the training split.

use std::fs;
use std::path::Path;

use crate::corpus::{
    build_vocabulary, encode_pairs, extract_factual_lexicon, pair_all, parse_native, select_dialogues, to_native_jsonl,
    CorpusFormat, Dialogue, EncodedPair, FactualLexicon, LexiconRules, Speaker, Split, SplitManifest, Vocabulary,
    DEFAULT_MAX_SIZE, DEFAULT_MIN_FREQ,
};
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CUSTOMER_VOCAB_FILE: &str = "customer.vocab";
pub const AGENT_VOCAB_FILE: &str = "agent.vocab";
pub const LEXICON_FILE: &str = "lexicon";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareOptions {
    pub format: CorpusFormat,
    pub seed: u64,
    pub min_freq: usize,
    pub max_size: usize,
    pub rules: LexiconRules,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            format: CorpusFormat::Jsonl,
            seed: 0,
            min_freq: DEFAULT_MIN_FREQ,
            max_size: DEFAULT_MAX_SIZE,
            rules: LexiconRules::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    pub dialogues: Vec<Dialogue>,
    pub splits: SplitManifest,
    pub customer_vocab: Vocabulary,
    pub agent_vocab: Vocabulary,
    pub lexicon: FactualLexicon,
}

impl PreparedCorpus {
    pub fn build(dialogues: Vec<Dialogue>, opts: &PrepareOptions) -> Result<Self> {
        if dialogues.is_empty() {
            return Err(Error::Empty("corpus has no dialogues".into()));
        }
        let splits = SplitManifest::split(&dialogues, opts.format, opts.seed);
        let train = pair_all(&select_dialogues(&dialogues, &splits.train)?);
        if train.is_empty() {
            return Err(Error::Empty("training split has no utterance pairs".into()));
        }
        let customer_vocab = build_vocabulary(&train, Speaker::Customer, opts.min_freq, opts.max_size)?;
        let agent_vocab = build_vocabulary(&train, Speaker::Agent, opts.min_freq, opts.max_size)?;
        let lexicon = extract_factual_lexicon(&train, &opts.rules);
        Ok(Self { dialogues, splits, customer_vocab, agent_vocab, lexicon })
    }

    pub fn vocabs(&self) -> (&Vocabulary, &Vocabulary) {
        (&self.customer_vocab, &self.agent_vocab)
    }

    pub fn split(&self, split: Split) -> Result<Vec<Dialogue>> {
        select_dialogues(&self.dialogues, self.splits.ids(split))
    }

    pub fn encoded(&self, split: Split) -> Result<Vec<EncodedPair>> {
        Ok(encode_pairs(&pair_all(&self.split(split)?), &self.customer_vocab, &self.agent_vocab))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(CORPUS_FILE, to_native_jsonl(&self.dialogues))?;
        write(SPLITS_FILE, serde_json::to_string_pretty(&self.splits)? + "\n")?;
        self.customer_vocab.save(dir.join(CUSTOMER_VOCAB_FILE))?;
        self.agent_vocab.save(dir.join(AGENT_VOCAB_FILE))?;
        self.lexicon.save(dir.join(LEXICON_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let dialogues = parse_native(&read(CORPUS_FILE)?)?;
        let splits: SplitManifest = serde_json::from_str(&read(SPLITS_FILE)?)?;
        Ok(Self {
            dialogues,
            splits,
            customer_vocab: Vocabulary::load(dir.join(CUSTOMER_VOCAB_FILE), Speaker::Customer)?,
            agent_vocab: Vocabulary::load(dir.join(AGENT_VOCAB_FILE), Speaker::Agent)?,
            lexicon: FactualLexicon::load(dir.join(LEXICON_FILE))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};

    #[test]
    fn directory_round_trip() {
        let dialogues = generate(&SyntheticConfig { n_dialogues: 40, ..Default::default() }).unwrap();
        let prepared = PreparedCorpus::build(dialogues, &PrepareOptions::default()).unwrap();
        assert!(prepared.lexicon.contains("qnvdz4rt"));
        assert!(prepared.agent_vocab.contains("qnvdz4rt"));
        let dir = tempfile::tempdir().unwrap();
        prepared.save(dir.path()).unwrap();
        assert_eq!(PreparedCorpus::load(dir.path()).unwrap(), prepared);
        assert_eq!(prepared.split(Split::Test).unwrap().len(), 4);
    }
}
