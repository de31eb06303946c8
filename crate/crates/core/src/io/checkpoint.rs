//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "FERN" | version u32 | entry count u32
//! per entry: name length u32 | name UTF-8 | dtype u8 | rank u32 |
//!            extents u64 × rank | values
//! config length u32 | config text UTF-8
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = u32 integer entries (fern split
//! dimensions and offsets).

use std::path::Path;

use super::{write_atomic, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use crate::train::{build_model, Model, StateValue};

pub const MAGIC: &[u8; 4] = b"FERN";
pub const VERSION: u32 = 1;

const CODE_F32: u8 = 0;
const CODE_F64: u8 = 1;
const CODE_U32: u8 = 2;

/// One named array of a checkpoint, in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Index {
        shape: Vec<usize>,
        values: Vec<usize>,
    },
}

impl Entry {
    fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::Index { shape, .. } => shape,
        }
    }

    fn into_state<T: Element>(self) -> StateValue<T> {
        match self {
            Entry::F32(t) => StateValue::Float(t.cast()),
            Entry::F64(t) => StateValue::Float(t.cast()),
            Entry::Index { shape, values } => StateValue::Index { shape, values },
        }
    }

    /// Entries hold values only; which tensors train is decided by the model
    /// they are loaded into.
    fn from_state<T: Element>(value: StateValue<T>) -> Self {
        match value {
            StateValue::Index { shape, values } => Entry::Index { shape, values },
            StateValue::Float(t) => match T::DTYPE {
                DType::F32 => Entry::F32(t.cast().with_requires_grad(false)),
                DType::F64 => Entry::F64(t.cast().with_requires_grad(false)),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &Model<T>, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.model = model.config().clone();
        Self {
            config,
            entries: model
                .state()
                .into_iter()
                .map(|(name, v)| (name, Entry::from_state(v)))
                .collect(),
        }
    }

    /// Rebuilds the model in precision `T`, converting stored values when the
    /// checkpoint was written in the other precision.
    pub fn to_model<T: Element>(&self) -> Result<Model<T>> {
        let mut model = build_model::<T>(&self.config.model)?;
        model.load_state(
            self.entries
                .iter()
                .map(|(n, e)| (n.clone(), e.clone().into_state()))
                .collect(),
        )?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match entry {
                Entry::F32(_) => CODE_F32,
                Entry::F64(_) => CODE_F64,
                Entry::Index { .. } => CODE_U32,
            });
            out.extend_from_slice(&(entry.shape().len() as u32).to_le_bytes());
            for &d in entry.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::Index { values, .. } => {
                    for &v in values {
                        out.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                }
            }
        }
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "missing FERN magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?
                .to_string();
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(
                    "checkpoint",
                    format!("entry `{name}` has rank {rank}"),
                ));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| {
                    Error::format("checkpoint", format!("entry `{name}` extent overflows"))
                })?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    Error::format("checkpoint", format!("entry `{name}` is too large"))
                })?;
            let entry = match code {
                CODE_F32 => Entry::F32(Tensor::new(shape, r.values::<f32>(n)?)?),
                CODE_F64 => Entry::F64(Tensor::new(shape, r.values::<f64>(n)?)?),
                CODE_U32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| r.truncated())?)?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                        .collect();
                    Entry::Index { shape, values }
                }
                other => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("entry `{name}` has unknown dtype code {other}"),
                    ))
                }
            };
            entries.push((name, entry));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "config block is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                "checkpoint",
                "trailing bytes after config block",
            ));
        }
        Ok(Self {
            config: RunConfig::parse(text)?,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> Error {
        Error::format("file", format!("truncated at byte {}", self.pos))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.truncated())?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn values<T: Element>(&mut self, n: usize) -> Result<Vec<T>> {
        let len = n.checked_mul(T::BYTES).ok_or_else(|| self.truncated())?;
        Ok(self
            .take(len)?
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Backbone;

    fn sample(backbone: Backbone) -> (Model<f32>, Checkpoint) {
        let mut cfg = RunConfig::reference(backbone);
        cfg.model.seed = 11;
        let model = build_model::<f32>(&cfg.model).unwrap();
        let ckpt = Checkpoint::from_model(&model, &cfg);
        (model, ckpt)
    }

    #[test]
    fn round_trip_is_lossless() {
        for backbone in Backbone::ALL {
            let (model, ckpt) = sample(backbone);
            let bytes = ckpt.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.encode(), bytes);
            let restored = back.to_model::<f32>().unwrap();
            assert_eq!(restored.state(), model.state());
        }
    }

    #[test]
    fn f64_entries_round_trip() {
        let mut cfg = RunConfig::reference(Backbone::Fern);
        cfg.model.dtype = DType::F64;
        let model = build_model::<f64>(&cfg.model).unwrap();
        let back = Checkpoint::decode(&Checkpoint::from_model(&model, &cfg).encode()).unwrap();
        assert!(back.entries.iter().any(|(_, e)| matches!(e, Entry::F64(_))));
        assert_eq!(back.to_model::<f64>().unwrap().state(), model.state());
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (_, ckpt) = sample(Backbone::Conv);
        let mut bytes = ckpt.encode();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::Version {
                found: 7,
                expected: 1,
                ..
            })
        ));
    }

    #[test]
    fn corruption_gives_typed_errors() {
        let (_, ckpt) = sample(Backbone::Fern);
        let bytes = ckpt.encode();
        for cut in [0, 3, 8, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Format { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (_, ckpt) = sample(Backbone::BinConv);
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        let missing = dir.path().join("absent.ckpt");
        match Checkpoint::load(&missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }
}
