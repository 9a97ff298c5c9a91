//! Binary checkpoint format.
//!
//! ```text
//! "OSGN" | version u32 | q_order u32 | tensor count u32
//! per tensor: name_len u16 | name (ASCII) | ndim u8 | dims u32 × ndim | f32 × Π dims
//! ```
//!
//! All integers and floats are little-endian; there is no padding. Model
//! tensors come first in [`OSegNetModel::named_tensors`] order; optimizer
//! state, when present, follows as `adam.*` tensors.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, OSegNetModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OSGN";
pub const VERSION: u32 = 1;

/// A decoded checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub q_order: u32,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(q_order: u32, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&q_order.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !name.is_ascii() || name.len() > u16::MAX as usize {
            return Err(CheckpointError::Malformed(format!("bad tensor name `{name}`")).into());
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes via a temporary sibling file so an interrupted save never
/// clobbers the previous checkpoint.
pub fn write_checkpoint(path: &Path, q_order: u32, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = encode(q_order, tensors)?;
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
    remaining: u64,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| truncated(e, what))?;
        self.remaining = self.remaining.saturating_sub(N as u64);
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    fn need(&self, bytes: u64, what: &str) -> Result<()> {
        if bytes > self.remaining {
            return Err(CheckpointError::Truncated {
                what: what.to_string(),
            }
            .into());
        }
        Ok(())
    }

    fn vec(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        self.need(len as u64, what)?;
        let mut v = vec![0u8; len];
        self.inner
            .read_exact(&mut v)
            .map_err(|e| truncated(e, what))?;
        self.remaining -= len as u64;
        Ok(v)
    }
}

fn truncated(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        CheckpointError::Truncated {
            what: what.to_string(),
        }
        .into()
    } else {
        Error::Io {
            path: what.into(),
            source: e,
        }
    }
}

fn decode<R: Read>(mut r: Reader<R>) -> Result<RawCheckpoint> {
    let magic = r.bytes::<4>("magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let q_order = r.u32("q_order")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let what = format!("tensor #{i}");
        let name_len = u16::from_le_bytes(r.bytes::<2>(&what)?) as usize;
        let name = String::from_utf8(r.vec(name_len, &what)?)
            .ok()
            .filter(|n| n.is_ascii())
            .ok_or_else(|| CheckpointError::Malformed(format!("{what}: name is not ASCII")))?;
        let what = format!("tensor `{name}`");
        let ndim = r.bytes::<1>(&what)?[0] as usize;
        if ndim == 0 {
            return Err(CheckpointError::Malformed(format!("{what} has no dimensions")).into());
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&what)? as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .unwrap_or(u64::MAX);
        r.need(bytes, &what)?;
        let raw = r.vec(bytes as usize, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|_| CheckpointError::Malformed(format!("{what} has shape {shape:?}")))?;
        tensors.push((name, tensor));
    }
    Ok(RawCheckpoint { q_order, tensors })
}

pub fn decode_bytes(bytes: &[u8]) -> Result<RawCheckpoint> {
    decode(Reader {
        inner: bytes,
        remaining: bytes.len() as u64,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let remaining = file.metadata().map_err(|e| Error::io(path, e))?.len();
    decode(Reader {
        inner: BufReader::new(file),
        remaining,
    })
}

pub fn save_checkpoint(model: &OSegNetModel, path: &Path) -> Result<()> {
    save_checkpoint_with(model, &[], path)
}

/// Saves the model followed by `extra` tensors (e.g. optimizer state).
pub fn save_checkpoint_with(
    model: &OSegNetModel,
    extra: &[(String, &Tensor)],
    path: &Path,
) -> Result<()> {
    let named = model.named_tensors();
    let mut all: Vec<(&str, &Tensor)> = named.iter().map(|(n, t, _)| (n.as_str(), *t)).collect();
    all.extend(extra.iter().map(|(n, t)| (n.as_str(), *t)));
    write_checkpoint(path, model.config.q_order as u32, &all)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<OSegNetModel> {
    load_checkpoint_with(path, config).map(|(m, _)| m)
}

/// Loads a model plus any tensors stored after it.
pub fn load_checkpoint_with(
    path: &Path,
    config: &ModelConfig,
) -> Result<(OSegNetModel, Vec<(String, Tensor)>)> {
    let raw = read_checkpoint(path)?;
    model_from_raw(raw, config)
}

/// Checks a decoded checkpoint against the shape table of `config` and
/// moves its tensors into a model.
pub fn model_from_raw(
    raw: RawCheckpoint,
    config: &ModelConfig,
) -> Result<(OSegNetModel, Vec<(String, Tensor)>)> {
    let mut model = OSegNetModel::build(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut tensors = raw.tensors.into_iter();
    let mut slots = model.named_tensors_mut();
    let expected = slots.len();
    for (position, (name, slot, _)) in slots.iter_mut().enumerate() {
        let Some((found_name, t)) = tensors.next() else {
            return Err(CheckpointError::Count {
                found: position,
                expected,
            }
            .into());
        };
        if found_name != *name {
            return Err(CheckpointError::NameMismatch {
                position,
                expected: name.clone(),
                found: found_name,
            }
            .into());
        }
        if t.shape() != slot.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: t.shape().to_vec(),
                expected: slot.shape().to_vec(),
            }
            .into());
        }
        **slot = t;
    }
    drop(slots);
    Ok((model, tensors.collect()))
}
