//! Dialogue records and the corpus loaders.
//!
//! Every source format is converted into the native JSONL form, one object
//! per line: `{"id", "turns": [{"speaker", "text"}], "domains": [...]}`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tokenize::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Customer,
    Agent,
}

impl Speaker {
    pub const BOTH: [Speaker; 2] = [Speaker::Customer, Speaker::Agent];

    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Customer => "customer",
            Speaker::Agent => "agent",
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Customer => Speaker::Agent,
            Speaker::Agent => Speaker::Customer,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Speaker {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "customer" => Ok(Speaker::Customer),
            "agent" => Ok(Speaker::Agent),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub domains: BTreeSet<String>,
}

impl Dialogue {
    /// Every token of the given role, in order of occurrence.
    pub fn tokens_of(&self, role: Speaker) -> impl Iterator<Item = &str> {
        self.turns.iter().filter(move |t| t.speaker == role).flat_map(|t| t.tokens.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    MultiWoz,
    Taskmaster,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "multiwoz-json" => Ok(CorpusFormat::MultiWoz),
            "taskmaster-json" => Ok(CorpusFormat::Taskmaster),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeTurn {
    speaker: String,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NativeRecord {
    id: String,
    turns: Vec<NativeTurn>,
    #[serde(default)]
    domains: Vec<String>,
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::Jsonl => parse_native(&text),
        CorpusFormat::MultiWoz => parse_multiwoz(&text),
        CorpusFormat::Taskmaster => parse_taskmaster(&text),
    }
}

pub fn parse_native(text: &str) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: NativeRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord { index, message: e.to_string() })?;
        let mut turns = Vec::with_capacity(record.turns.len());
        for t in record.turns {
            let speaker = t.speaker.parse().map_err(|tag| Error::UnknownSpeaker { index, tag })?;
            turns.push((speaker, t.text));
        }
        out.push(build_dialogue(index, record.id, turns, record.domains)?);
    }
    Ok(out)
}

fn build_dialogue(index: usize, id: String, turns: Vec<(Speaker, String)>, domains: Vec<String>) -> Result<Dialogue> {
    if turns.is_empty() {
        return Err(Error::MalformedRecord { index, message: format!("dialogue {id:?} has no turns") });
    }
    let mut out = Vec::with_capacity(turns.len());
    for (k, (speaker, text)) in turns.into_iter().enumerate() {
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(Error::MalformedRecord { index, message: format!("dialogue {id:?} turn {k} has empty text") });
        }
        out.push(Turn { speaker, tokens });
    }
    Ok(Dialogue { id, turns: out, domains: domains.into_iter().collect() })
}

const MULTIWOZ_DOMAINS: &[&str] = &["attraction", "hospital", "hotel", "police", "restaurant", "taxi", "train"];

/// MultiWOZ 2.0 `data.json`: an object keyed by dialogue id whose `log`
/// alternates customer (even index) and agent (odd index) turns.
fn parse_multiwoz(text: &str) -> Result<Vec<Dialogue>> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedRecord { index: 0, message: e.to_string() })?;
    let Value::Object(map) = root else {
        return Err(Error::MalformedRecord { index: 0, message: "expected a JSON object".into() });
    };
    let mut out = Vec::with_capacity(map.len());
    for (index, (id, record)) in map.into_iter().enumerate() {
        let malformed = |m: &str| Error::MalformedRecord { index, message: format!("{id}: {m}") };
        let log = record.get("log").and_then(Value::as_array).ok_or_else(|| malformed("missing log"))?;
        let mut turns = Vec::with_capacity(log.len());
        for (k, entry) in log.iter().enumerate() {
            let text = entry.get("text").and_then(Value::as_str).ok_or_else(|| malformed("turn without text"))?;
            let speaker = if k % 2 == 0 { Speaker::Customer } else { Speaker::Agent };
            turns.push((speaker, text.to_string()));
        }
        let mut domains = Vec::new();
        if let Some(goal) = record.get("goal").and_then(Value::as_object) {
            for d in MULTIWOZ_DOMAINS {
                if goal.get(*d).and_then(Value::as_object).is_some_and(|o| !o.is_empty()) {
                    domains.push((*d).to_string());
                }
            }
        }
        out.push(build_dialogue(index, id, turns, domains)?);
    }
    Ok(out)
}

/// Taskmaster-1 written dialogues: an array of conversations whose
/// utterances carry `USER` / `ASSISTANT` speaker tags. The task family is
/// the `instruction_id` without its trailing variant number.
fn parse_taskmaster(text: &str) -> Result<Vec<Dialogue>> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedRecord { index: 0, message: e.to_string() })?;
    let Value::Array(items) = root else {
        return Err(Error::MalformedRecord { index: 0, message: "expected a JSON array".into() });
    };
    let mut out = Vec::with_capacity(items.len());
    for (index, record) in items.into_iter().enumerate() {
        let malformed = |m: &str| Error::MalformedRecord { index, message: m.to_string() };
        let id = record
            .get("conversation_id")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing conversation_id"))?
            .to_string();
        let utterances =
            record.get("utterances").and_then(Value::as_array).ok_or_else(|| malformed("missing utterances"))?;
        let mut turns = Vec::with_capacity(utterances.len());
        for u in utterances {
            let tag = u.get("speaker").and_then(Value::as_str).unwrap_or_default();
            let speaker = match tag {
                "USER" => Speaker::Customer,
                "ASSISTANT" => Speaker::Agent,
                other => return Err(Error::UnknownSpeaker { index, tag: other.to_string() }),
            };
            let text = u.get("text").and_then(Value::as_str).ok_or_else(|| malformed("utterance without text"))?;
            turns.push((speaker, text.to_string()));
        }
        let domains = record
            .get("instruction_id")
            .and_then(Value::as_str)
            .map(|s| vec![task_family(s).to_string()])
            .unwrap_or_default();
        out.push(build_dialogue(index, id, turns, domains)?);
    }
    Ok(out)
}

fn task_family(instruction_id: &str) -> &str {
    match instruction_id.rsplit_once('-') {
        Some((head, tail)) if !tail.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) => head,
        _ => instruction_id,
    }
}

/// Serializes dialogues into the native JSONL form.
pub fn to_native_jsonl(dialogues: &[Dialogue]) -> String {
    let mut out = String::new();
    for d in dialogues {
        let record = NativeRecord {
            id: d.id.clone(),
            turns: d
                .turns
                .iter()
                .map(|t| NativeTurn { speaker: t.speaker.as_str().to_string(), text: t.tokens.join(" ") })
                .collect(),
            domains: d.domains.iter().cloned().collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("native record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record_two_turns() {
        let line = r#"{"id":"d1","turns":[{"speaker":"customer","text":"Hi there."},{"speaker":"agent","text":"Hello!"}],"domains":["hotel"]}"#;
        let ds = parse_native(line).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].turns.len(), 2);
        assert_eq!(ds[0].turns[0].tokens, ["hi", "there", "."]);
        assert!(ds[0].domains.contains("hotel"));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_native("").unwrap().is_empty());
    }

    #[test]
    fn empty_turn_text_names_the_record() {
        let text = concat!(
            r#"{"id":"ok","turns":[{"speaker":"customer","text":"a"}]}"#,
            "\n",
            r#"{"id":"bad","turns":[{"speaker":"customer","text":"  "}]}"#
        );
        match parse_native(text) {
            Err(Error::MalformedRecord { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("bad"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_speaker_is_rejected() {
        let text = r#"{"id":"x","turns":[{"speaker":"robot","text":"a"}]}"#;
        assert!(matches!(parse_native(text), Err(Error::UnknownSpeaker { index: 0, .. })));
    }

    #[test]
    fn multiwoz_alternates_and_reads_goal_domains() {
        let text = r#"{"MUL0001.json":{"goal":{"hotel":{"info":{"area":"north"}},"taxi":{},"message":[]},
            "log":[{"text":"I need a hotel.","metadata":{}},{"text":"Sure.","metadata":{}}]}}"#;
        let ds = parse_multiwoz(text).unwrap();
        assert_eq!(ds[0].turns[0].speaker, Speaker::Customer);
        assert_eq!(ds[0].turns[1].speaker, Speaker::Agent);
        assert_eq!(ds[0].domains.iter().collect::<Vec<_>>(), ["hotel"]);
    }

    #[test]
    fn taskmaster_maps_speakers_and_task_family() {
        let text = r#"[{"conversation_id":"dlg-1","instruction_id":"restaurant-table-2",
            "utterances":[{"index":0,"speaker":"USER","text":"Table for two"},{"index":1,"speaker":"ASSISTANT","text":"Sure"}]}]"#;
        let ds = parse_taskmaster(text).unwrap();
        assert_eq!(ds[0].id, "dlg-1");
        assert_eq!(ds[0].domains.iter().collect::<Vec<_>>(), ["restaurant-table"]);
        let bad = text.replace("ASSISTANT", "NARRATOR");
        assert!(matches!(parse_taskmaster(&bad), Err(Error::UnknownSpeaker { .. })));
    }

    #[test]
    fn native_round_trip() {
        let line = r#"{"id":"d1","turns":[{"speaker":"customer","text":"book at 13:45 ."}],"domains":[]}"#;
        let ds = parse_native(line).unwrap();
        assert_eq!(parse_native(&to_native_jsonl(&ds)).unwrap(), ds);
    }
}
