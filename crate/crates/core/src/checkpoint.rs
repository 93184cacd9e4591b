//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SSTB`, `u32` version, `u32` count of
//! metadata entries each stored as two length-prefixed UTF-8 strings, `u32`
//! tensor count, then per tensor a length-prefixed name, `u32` rank, `u64`
//! dims and `f32` data. Metadata is written in key order, so equal contents
//! always give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::classify::{Task, HEAD_B, HEAD_W};
use crate::encoder::{self, EncoderError, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::objectives::{MLM_BIAS, NSP_B, NSP_W};

pub const MAGIC: &[u8; 4] = b"SSTB";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("invalid UTF-8 in checkpoint string")]
    Utf8,
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("unexpected tensor {0} for a {1} checkpoint")]
    UnexpectedTensor(String, String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// What the tensor table holds besides the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Masked-word and next-sentence heads.
    Pretrain,
    /// A classification head for the task.
    Classifier(Task),
}

impl Kind {
    pub fn name(self) -> String {
        match self {
            Kind::Pretrain => "pretrain".into(),
            Kind::Classifier(t) => format!("classifier:{t}"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "pretrain" => Ok(Kind::Pretrain),
            Some(("classifier", t)) => t
                .parse()
                .map(Kind::Classifier)
                .map_err(CheckpointError::Meta),
            _ => Err(CheckpointError::Meta(format!("unknown kind {s:?}"))),
        }
    }

    /// Non-encoder tensors and their shapes.
    pub fn extra_shapes(self, config: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
        let h = config.hidden;
        match self {
            Kind::Pretrain => vec![
                (MLM_BIAS, vec![config.vocab_size]),
                (NSP_W, vec![h, 2]),
                (NSP_B, vec![2]),
            ],
            Kind::Classifier(t) => vec![
                (HEAD_W, vec![h, t.num_classes()]),
                (HEAD_B, vec![t.num_classes()]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub kind: Kind,
    /// Free-form metadata (provenance, vocab fingerprint, ...). Keys
    /// starting with `model.` or equal to `kind` are reserved.
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Utf8)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// Validates shapes and assembles a checkpoint.
    pub fn new(
        config: ModelConfig,
        kind: Kind,
        meta: BTreeMap<String, String>,
        params: ParamStore<f32>,
    ) -> Result<Self> {
        let ck = Self {
            config,
            kind,
            meta,
            params,
        };
        ck.validate()?;
        Ok(ck)
    }

    /// Every encoder and head tensor present with the right shape, nothing
    /// else, all finite.
    pub fn validate(&self) -> Result<()> {
        encoder::check_params(&self.params, &self.config)?;
        let extras = self.kind.extra_shapes(&self.config);
        for (name, shape) in &extras {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| EncoderError::MissingParam(name.to_string()))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Shape {
                    name: name.to_string(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(EncoderError::NonFinite(name.to_string()).into());
            }
        }
        let expected = encoder::param_shapes(&self.config).len() + extras.len();
        if self.params.len() != expected {
            let known: Vec<String> = encoder::param_shapes(&self.config)
                .into_iter()
                .map(|(n, _)| n)
                .chain(extras.iter().map(|(n, _)| n.to_string()))
                .collect();
            let stray = self
                .params
                .names()
                .iter()
                .find(|n| !known.contains(n))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::UnexpectedTensor(stray, self.kind.name()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        meta.extend(self.config.to_pairs());
        meta.insert("kind".into(), self.kind.name());
        let mut out = Vec::with_capacity(16 + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        for (k, v) in &meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let config = ModelConfig::from_pairs(&meta)?;
        let kind = Kind::parse(
            &meta
                .remove("kind")
                .ok_or_else(|| CheckpointError::Meta("missing kind".into()))?,
        )?;
        meta.retain(|k, _| !k.starts_with("model."));

        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(shape, data)
                .map_err(|e| CheckpointError::Meta(format!("{name}: {e}")))?;
            params
                .insert(name.clone(), t)
                .map_err(|_| CheckpointError::Meta(format!("duplicate tensor {name}")))?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Self::new(config, kind, meta, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }
}
