//! Sectioned binary checkpoint format.
//!
//! ```text
//! "GFCKPT1\n"
//! u32 LE config length, config bytes (canonical JSON, may be empty)
//! repeated until EOF:
//!   u32 LE name length, name bytes (UTF-8)
//!   u8 dtype (0 = f32, 1 = f64)
//!   u32 LE rank, rank × u32 LE dims
//!   raw little-endian values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{numel, DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GFCKPT1\n";
const MAGIC_FAMILY: &[u8; 6] = b"GFCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl TensorRecord {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        TensorRecord {
            name: name.to_string(),
            dtype: T::DTYPE,
            dims: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes the values, converting precision when the stored dtype differs.
    pub fn values<T: Real>(&self) -> Vec<T> {
        let size = self.dtype.size();
        self.bytes
            .chunks_exact(size)
            .map(|c| match self.dtype {
                DType::F32 => T::c(f32::read_le(c) as f64),
                DType::F64 => T::c(f64::read_le(c)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(config_json: String, params: &[Param<T>]) -> Self {
        Checkpoint {
            config_json,
            tensors: params
                .iter()
                .map(|p| TensorRecord::from_tensor(&p.name, &p.tensor))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.config_json.len());
        out.extend_from_slice(self.config_json.as_bytes());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype as u8);
            put_u32(&mut out, t.dims.len());
            t.dims.iter().for_each(|&d| put_u32(&mut out, d));
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            if bytes.starts_with(MAGIC_FAMILY) {
                let tag = String::from_utf8_lossy(&bytes[..bytes.len().min(MAGIC.len())]).into_owned();
                return Err(Error::Version(tag.trim_end().to_string()));
            }
            return Err(Error::Corrupt("missing GFCKPT1 magic header".into()));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let cfg_len = r.u32("config length")?;
        let config_json = String::from_utf8(r.take(cfg_len, "config section")?.to_vec())
            .map_err(|_| Error::Corrupt("config section is not UTF-8".into()))?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32("name length")?;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Corrupt(format!("tensor name at byte {} is not UTF-8", r.pos)))?;
            let tag = r.take(1, "dtype tag")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown dtype tag {tag} for {name}")))?;
            let rank = r.u32("rank")?;
            if rank > 8 {
                return Err(Error::Corrupt(format!("implausible rank {rank} for {name}")));
            }
            let dims = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
            let len = numel(&dims)
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Corrupt(format!("size overflow for {name}")))?;
            let data = r
                .take(len, "tensor values")
                .map_err(|_| Error::Corrupt(format!("truncated values for tensor {name}")))?;
            tensors.push(TensorRecord {
                name,
                dtype,
                dims,
                bytes: data.to_vec(),
            });
        }
        Ok(Checkpoint { config_json, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field exceeds u32").to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}
