//! Single-file model archive.
//!
//! Layout (little endian): the 8-byte magic `TETECKPT`, a `u32` format
//! version, a `u32` length and that many bytes of JSON header, a `u32`
//! parameter count, then per parameter a `u32` name length, the UTF-8
//! name, `u32` rows, `u32` cols and `rows × cols` `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::corpus::{Speaker, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Matrix;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"TETECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub customer_vocab: Vec<String>,
    pub agent_vocab: Vec<String>,
    /// Domain labels of the classifier head, if any.
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub multi_label: bool,
    #[serde(default)]
    pub step: usize,
    /// Training settings the parameters were produced with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(model: &Model, params: ParamStore<f32>, customer_vocab: &Vocabulary, agent_vocab: &Vocabulary) -> Self {
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                customer_vocab: customer_vocab.words().to_vec(),
                agent_vocab: agent_vocab.words().to_vec(),
                labels: Vec::new(),
                multi_label: false,
                step: 0,
                train: None,
            },
            params,
        }
    }

    pub fn vocabularies(&self) -> (Vocabulary, Vocabulary) {
        (
            Vocabulary::from_tokens(Speaker::Customer, self.header.customer_vocab.iter().cloned()),
            Vocabulary::from_tokens(Speaker::Agent, self.header.agent_vocab.iter().cloned()),
        )
    }

    /// Rebuilds the model layout around the stored parameters.
    pub fn model(&mut self) -> Result<Model> {
        Model::bind(self.header.model.clone(), &mut self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&len32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len32(self.params.len())?.to_le_bytes());
        for (_, name, m) in self.params.iter() {
            out.extend_from_slice(&len32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len32(m.rows())?.to_le_bytes());
            out.extend_from_slice(&len32(m.cols())?.to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format version {version}")));
        }
        let header_len = read_u32(&mut r)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut r, header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("parameter too large".into()))?;
            let raw = take(&mut r, n.checked_mul(4).ok_or_else(|| Error::Checkpoint("parameter too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
            params.insert(name, Matrix::from_vec(rows, cols, data));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn len32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit the format")))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
