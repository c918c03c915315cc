//! `SCS1` stream containers.
//!
//! Layout (little-endian): `SCS1`, version u32, header (u32 length + UTF-8
//! JSON), then one record per chunk until end of file. A record is its body
//! length u32, the body, and a u64 FNV-1a checksum of the body. The body holds
//! chunk index u32, cursor f64, window start u32, pointer endpoint f64, the
//! six latency fields f64 plus a real-time byte, then three arrays (video
//! latents `[C, T, H, W]`, audio latents `[T, C]`, toy pixels), each written as
//! rank u32, dims u32×rank and f32 values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentBlock, Provenance};
use crate::params::Fnv;
use crate::scalar::Real;
use crate::stream::{ChunkOutput, LatencyRecord, StageDurations};
use crate::synthworld::WorldConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SCS1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub world: WorldConfig,
    pub transcript: Vec<u32>,
    pub prompt: usize,
    /// Speaker timbre used to strip the voice before transcript decoding.
    pub timbre: Vec<f64>,
    pub sink: bool,
    pub sampling_steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord<T> {
    pub index: usize,
    pub cursor: f64,
    pub window_start: usize,
    pub s_hat: f64,
    pub latency: LatencyRecord,
    pub video: LatentBlock<T>,
    pub audio: LatentBlock<T>,
    pub frames: Tensor<T>,
}

impl<T: Real> ChunkRecord<T> {
    pub fn from_output(c: &ChunkOutput<T>) -> Self {
        Self {
            index: c.index,
            cursor: c.cursor,
            window_start: c.window_start,
            s_hat: c.s_hat,
            latency: c.latency,
            video: c.video.clone(),
            audio: c.audio.clone(),
            frames: c.frames.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend((self.index as u32).to_le_bytes());
        b.extend(self.cursor.to_le_bytes());
        b.extend((self.window_start as u32).to_le_bytes());
        b.extend(self.s_hat.to_le_bytes());
        let l = &self.latency;
        for x in [l.generate_s, l.decode_s, l.preprocess_s, l.write_s, l.wall_s, l.budget_s] {
            b.extend(x.to_le_bytes());
        }
        b.push(u8::from(l.real_time));
        for t in [self.video.tensor(), self.audio.tensor(), &self.frames] {
            b.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend((d as u32).to_le_bytes());
            }
            for &x in t.data() {
                b.extend(x.as_f32().to_le_bytes());
            }
        }
        b
    }

    fn decode(body: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: body, pos: 0 };
        let index = r.u32()? as usize;
        let cursor = r.f64()?;
        let window_start = r.u32()? as usize;
        let s_hat = r.f64()?;
        let mut f = [0.0; 6];
        for x in f.iter_mut() {
            *x = r.f64()?;
        }
        let real_time = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(bad(format!("real-time flag {b}"))),
        };
        let stages = StageDurations { generate_s: f[0], decode_s: f[1], preprocess_s: f[2], write_s: f[3] };
        let latency = LatencyRecord { wall_s: f[4], budget_s: f[5], real_time, ..LatencyRecord::new(stages, f[4]) };
        let video = LatentBlock::video(r.tensor()?, Provenance::Generated)?;
        let audio = LatentBlock::audio(r.tensor()?, Provenance::Generated)?;
        let frames = r.tensor()?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes in record"));
        }
        Ok(Self { index, cursor, window_start, s_hat, latency, video, audio, frames })
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "SCS1 stream", detail: detail.into() }
}

pub struct StreamWriter<W: Write> {
    w: W,
    chunks: usize,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut w: W, header: &StreamHeader) -> Result<Self> {
        let json = serde_json::to_string(header).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        Ok(Self { w, chunks: 0 })
    }

    pub fn write_record<T: Real>(&mut self, rec: &ChunkRecord<T>) -> Result<()> {
        let body = rec.encode();
        let mut h = Fnv::new();
        h.bytes(&body);
        self.w.write_all(&(body.len() as u32).to_le_bytes())?;
        self.w.write_all(&body)?;
        self.w.write_all(&h.finish().to_le_bytes())?;
        self.chunks += 1;
        Ok(())
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.flush()?;
        Ok(self.w)
    }
}

/// Parses a whole container.
pub fn read_stream<T: Real>(r: &mut impl Read) -> Result<(StreamHeader, Vec<ChunkRecord<T>>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    if c.take(4).map_err(|_| bad("bad magic"))? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let header: StreamHeader = serde_json::from_slice(c.take(n)?).map_err(|e| bad(format!("header: {e}")))?;
    header.world.validate()?;
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let n = c.u32()? as usize;
        let body = c.take(n)?;
        let sum = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
        let mut h = Fnv::new();
        h.bytes(body);
        if h.finish() != sum {
            return Err(bad(format!("checksum mismatch in record {}", records.len())));
        }
        records.push(ChunkRecord::decode(body)?);
    }
    Ok((header, records))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(bad(format!("rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("array too large"))?;
        let raw = self.take(len.checked_mul(4).ok_or_else(|| bad("array too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| T::from_f32_storage(f32::from_le_bytes(b.try_into().unwrap()))).collect();
        Tensor::from_vec(&shape, data)
    }
}
