//! `SCK1` checkpoint files: a stage tag, JSON metadata and named `f32` arrays.
//!
//! Layout (little-endian): `SCK1`, version u32, tag (u32 length + UTF-8),
//! metadata (u32 length + UTF-8 JSON), entry count u32, then per entry: name
//! (u32 length + UTF-8), rank u32, dims u32×rank, values f32×∏dims. A trailing
//! u64 FNV-1a checksum covers every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{Fnv, ParameterSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SCK1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Stage label, e.g. `teacher` or `student_stage1`.
    pub tag: String,
    pub meta: serde_json::Value,
    pub params: ParameterSet<T>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "SCK1 checkpoint", detail: detail.into() }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend((s.len() as u32).to_le_bytes());
    buf.extend(s.as_bytes());
}

impl<T: Real> Checkpoint<T> {
    pub fn new(tag: impl Into<String>, meta: &impl Serialize, params: ParameterSet<T>) -> Result<Self> {
        let meta = serde_json::to_value(meta).map_err(|e| bad(e.to_string()))?;
        Ok(Self { tag: tag.into(), meta, params })
    }

    pub fn meta_as<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| bad(format!("metadata: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        put_str(&mut buf, &self.tag);
        put_str(&mut buf, &self.meta.to_string());
        buf.extend((self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut buf, name);
            buf.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend((d as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend(x.as_f32().to_le_bytes());
            }
        }
        let mut h = Fnv::new();
        h.bytes(&buf);
        buf.extend(h.finish().to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        let mut h = Fnv::new();
        h.bytes(body);
        if h.finish() != u64::from_le_bytes(sum.try_into().unwrap()) {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let tag = r.string()?;
        let meta = serde_json::from_str(&r.string()?).map_err(|e| bad(format!("metadata: {e}")))?;
        let n = r.u32()?;
        let mut params = ParameterSet::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| r.take(4).map(|b| T::from_f32_storage(f32::from_le_bytes(b.try_into().unwrap()))))
                .collect::<Result<Vec<_>>>()?;
            if params.contains(&name) {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { tag, meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}
