//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "PATCKPT1"
//! format_version   u32
//! config           u32 length + UTF-8 key=value lines
//! tensor count     u32
//! per tensor       u32 name length + UTF-8 name
//!                  u32 ndim, ndim × u32 dims
//!                  4·product(dims) bytes of f32
//! ```

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{PatError, Result};
use crate::finetune::Classifier;
use crate::model::{KvMap, ModelConfig, ParamStore};
use crate::pretrain::{MaeConfig, MaeModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PATCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// What the tensor table holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Embedder, encoder and reconstruction decoder.
    Mae,
    /// Embedder, encoder and classification head.
    Classifier,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Mae => "mae",
            CheckpointKind::Classifier => "classifier",
        })
    }
}

impl FromStr for CheckpointKind {
    type Err = PatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(CheckpointKind::Mae),
            "classifier" => Ok(CheckpointKind::Classifier),
            other => Err(PatError::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub mae: Option<MaeConfig>,
    pub tensors: Vec<(String, Tensor)>,
}

fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(n, t)| {
            (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("store tensors are well-formed"))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_mae(model: &MaeModel) -> Self {
        Checkpoint {
            kind: CheckpointKind::Mae,
            model: model.cfg.clone(),
            mae: Some(model.mae.clone()),
            tensors: store_tensors(&model.store),
        }
    }

    /// `mae` carries the pretraining settings forward when the classifier
    /// was initialised from a pretrained checkpoint.
    pub fn from_classifier(model: &Classifier, mae: Option<&MaeConfig>) -> Self {
        Checkpoint {
            kind: CheckpointKind::Classifier,
            model: model.cfg.clone(),
            mae: mae.cloned(),
            tensors: store_tensors(&model.store),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of stored weights.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Weights whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// The key=value text stored in the config section.
    pub fn config_text(&self) -> String {
        let mut text = format!("kind={}\n", self.kind);
        self.model.write_kv(&mut text);
        if let Some(mae) = &self.mae {
            mae.write_kv(&mut text);
        }
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(PatError::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PatError::Checkpoint(format!("unsupported format version {version}")));
        }
        let text = r.string()?;
        let kv = KvMap::parse_text(&text).map_err(|e| PatError::Checkpoint(format!("config section: {e}")))?;
        let kind: CheckpointKind = kv.get("kind").map_err(bad_config)?.parse()?;
        let model = ModelConfig::from_kv(&kv).map_err(bad_config)?;
        let mae =
            if kv.find("mae.mask_ratio").is_some() { Some(MaeConfig::from_kv(&kv).map_err(bad_config)?) } else { None };

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes_len = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| PatError::Checkpoint(format!("tensor {name:?} has an oversized shape {shape:?}")))?;
            let raw = r.take(bytes_len).map_err(|_| {
                PatError::Checkpoint(format!("tensor {name:?} is truncated: expected {bytes_len} data bytes"))
            })?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(PatError::Checkpoint(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, model, mae, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| PatError::from(e).context(path.display().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ctx = || path.display().to_string();
        let bytes = fs::read(path).map_err(|e| PatError::from(e).context(ctx()))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(ctx()))
    }
}

fn bad_config(e: PatError) -> PatError {
    PatError::Checkpoint(format!("config section: {e}"))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PatError::Checkpoint(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| PatError::Checkpoint("string is not valid UTF-8".into()))
    }
}
