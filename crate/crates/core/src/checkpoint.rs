//! Model checkpoints: a versioned little-endian container holding the model
//! configuration, a tensor manifest and an `f64` payload.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GFFC"
//! 4       4     u32 version (1)
//! 8       4     u32 config length in bytes
//! 12      4     u32 tensor count
//! 16      ...   config text (UTF-8, key = value lines)
//!         ...   manifest, per tensor:
//!                 u16 name length, name bytes (UTF-8),
//!                 u8 rank, rank × u32 dims,
//!                 u64 offset into the payload, in elements
//!         8     u64 payload element count
//!         ...   payload, f64 values
//! ```
//!
//! Tensors are stored in manifest order and packed back to back.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_config_text, parse_model_config};
use crate::error::{Error, FormatError, Result, WithPath};
use crate::model::Model;
use crate::params::Params;

pub const MAGIC: [u8; 4] = *b"GFFC";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoded container, not yet tied to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<TensorEntry>,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        model.visit("", &mut |name, shape, values| {
            tensors.push(TensorEntry { name: name.to_string(), shape: shape.to_vec(), offset: payload.len() });
            payload.extend_from_slice(values);
        });
        Checkpoint { config_text: model_config_text(&model.config), tensors, payload }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &self.payload[t.offset..t.offset + t.len()])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len() * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(t.offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic, expected: MAGIC });
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let config_len = r.u32("header")? as usize;
        let count = r.u32("header")? as usize;
        let config_text = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|e| malformed("config", e.to_string()))?
            .to_string();

        let mut tensors: Vec<TensorEntry> = Vec::new();
        let mut expected_offset = 0usize;
        for i in 0..count {
            let name_len = r.u16("manifest")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "manifest")?)
                .map_err(|e| malformed("manifest", format!("entry {i}: {e}")))?
                .to_string();
            if name.is_empty() || tensors.iter().any(|t| t.name == name) {
                return Err(malformed("manifest", format!("entry {i}: empty or duplicate name `{name}`")));
            }
            let rank = r.take(1, "manifest")?[0] as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(malformed("manifest", format!("`{name}`: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("manifest")? as usize);
            }
            let offset = usize::try_from(r.u64("manifest")?)
                .map_err(|_| malformed("manifest", format!("`{name}`: offset overflow")))?;
            if offset != expected_offset {
                return Err(malformed("manifest", format!("`{name}`: offset {offset}, expected {expected_offset}")));
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| FormatError::ZeroDim { dims: shape.iter().map(|&d| d as u64).collect() })?;
            expected_offset = expected_offset
                .checked_add(len)
                .ok_or_else(|| FormatError::DimOverflow { dims: shape.iter().map(|&d| d as u64).collect() })?;
            tensors.push(TensorEntry { name, shape, offset });
        }

        let total = r.u64("payload length")?;
        if total != expected_offset as u64 {
            return Err(malformed("payload length", format!("{total}, manifest covers {expected_offset}")));
        }
        let need = expected_offset.checked_mul(8).and_then(|n| n.checked_add(r.pos));
        let rest = &bytes[r.pos..];
        match need {
            Some(need) if bytes.len() < need => return Err(FormatError::TruncatedPayload { need, have: bytes.len() }),
            None => return Err(FormatError::DimOverflow { dims: vec![total] }),
            Some(need) if bytes.len() > need => return Err(FormatError::TrailingBytes { extra: bytes.len() - need }),
            _ => {}
        }
        let mut payload = Vec::with_capacity(expected_offset);
        for (index, chunk) in rest.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite { index });
            }
            payload.push(v);
        }
        Ok(Checkpoint { config_text, tensors, payload })
    }

    /// Rebuild the model. The manifest must list exactly the model's tensors,
    /// in order and with matching shapes.
    pub fn to_model(&self) -> Result<Model> {
        let config = parse_model_config(&self.config_text)?;
        let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut expected = Vec::new();
        model.visit("", &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
        if expected.len() != self.tensors.len() {
            return Err(
                malformed("manifest", format!("{} tensors, model has {}", self.tensors.len(), expected.len())).into()
            );
        }
        for ((name, shape), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(malformed(
                    "manifest",
                    format!("found `{}` {:?}, expected `{name}` {shape:?}", t.name, t.shape),
                )
                .into());
            }
        }
        let mut i = 0;
        model.visit_mut("", &mut |_, values| {
            let t = &self.tensors[i];
            values.copy_from_slice(&self.payload[t.offset..t.offset + t.len()]);
            i += 1;
        });
        Ok(model)
    }
}

fn malformed(what: &'static str, detail: impl Into<String>) -> FormatError {
    FormatError::Malformed { what, detail: detail.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed(what, format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    Checkpoint::from_model(model).encode()
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    Checkpoint::decode(bytes)?.to_model()
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).at_path(path)
}
