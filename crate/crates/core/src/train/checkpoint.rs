//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SGCP`, `u32` version, `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64`
//! extents and the `f32` elements; a trailing `u64` FNV-1a hash covers every
//! preceding byte. The model configuration lives next to the checkpoint in
//! the same directory with a `.cfg` extension.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{parse_model_config, write_model_config, KeyValues, Model, NamedTensor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGCP";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Serialize tensors, converting every element to `f32`.
pub fn encode_checkpoint<T: Scalar>(params: &[NamedTensor<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let hash = fnv1a(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parse and verify checkpoint bytes. Nothing is returned unless the whole
/// file is well formed.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor<f32>>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Format("truncated file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if stored != fnv1a(body) {
        return Err(Error::Format("checksum mismatch (corrupt or truncated file)".into()));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflows".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?;
        params.push(NamedTensor { name, value });
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(params)
}

/// Path of the configuration stored beside `checkpoint`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write the parameters to `path` and the configuration beside it.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_atomic(&config_path(path), write_model_config(model.config()).as_bytes())?;
    write_atomic(path, &encode_checkpoint(model.params()))
}

/// Load a checkpoint and its configuration.
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let text = fs::read_to_string(config_path(path))?;
    let mut kv = KeyValues::parse(&text)?;
    let config = parse_model_config(&mut kv)?;
    kv.finish()?;
    load_checkpoint_into(path, config)
}

/// Load checkpoint tensors into `config`, checking every name and shape.
pub fn load_checkpoint_into(path: &Path, config: crate::model::ModelConfig) -> Result<Model<f32>> {
    let params = decode_checkpoint(&fs::read(path)?)?;
    Model::from_params(config, params)
}
