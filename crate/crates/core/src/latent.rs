//! Modality-tagged latent arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Video,
    Audio,
}

/// Where a block of latents came from. Streaming asserts on this to prove that
/// generated frames are never swapped for ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    GroundTruth,
    Generated,
    Noise,
    Derived,
}

/// Video latents are stored `[C, T, H, W]`, audio latents `[T, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBlock<T> {
    modality: Modality,
    data: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Real> LatentBlock<T> {
    pub fn video(data: Tensor<T>, provenance: Provenance) -> Result<Self> {
        if data.shape().len() != 4 {
            return Err(Error::Shape(format!("video latents need [C,T,H,W], got {:?}", data.shape())));
        }
        Ok(Self { modality: Modality::Video, data, provenance })
    }

    pub fn audio(data: Tensor<T>, provenance: Provenance) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::Shape(format!("audio latents need [T,C], got {:?}", data.shape())));
        }
        Ok(Self { modality: Modality::Audio, data, provenance })
    }

    pub fn zeros_video(c: usize, t: usize, h: usize, w: usize) -> Self {
        Self { modality: Modality::Video, data: Tensor::zeros(&[c, t, h, w]), provenance: Provenance::Derived }
    }

    pub fn zeros_audio(t: usize, c: usize) -> Self {
        Self { modality: Modality::Audio, data: Tensor::zeros(&[t, c]), provenance: Provenance::Derived }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn frames(&self) -> usize {
        match self.modality {
            Modality::Video => self.data.shape()[1],
            Modality::Audio => self.data.shape()[0],
        }
    }

    pub fn channels(&self) -> usize {
        match self.modality {
            Modality::Video => self.data.shape()[0],
            Modality::Audio => self.data.shape()[1],
        }
    }

    /// Spatial cells per frame (1 for audio).
    pub fn cells(&self) -> usize {
        match self.modality {
            Modality::Video => self.data.shape()[2] * self.data.shape()[3],
            Modality::Audio => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.frames() == 0
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }

    pub fn check_like(&self, other: &Self) -> Result<()> {
        if self.modality != other.modality || self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?}{:?} vs {:?}{:?}",
                self.modality,
                self.shape(),
                other.modality,
                other.shape()
            )));
        }
        Ok(())
    }

    /// Flattens into a `tokens × C` matrix; video tokens are ordered `(t, h, w)`.
    pub fn to_tokens(&self) -> Tensor<T> {
        match self.modality {
            Modality::Audio => self.data.clone(),
            Modality::Video => {
                let s = self.data.shape();
                let (c, t, hw) = (s[0], s[1], s[2] * s[3]);
                let mut out = vec![T::zero(); c * t * hw];
                let d = self.data.data();
                for ch in 0..c {
                    for f in 0..t {
                        for cell in 0..hw {
                            out[(f * hw + cell) * c + ch] = d[(ch * t + f) * hw + cell];
                        }
                    }
                }
                Tensor::from_vec(&[t * hw, c], out).unwrap()
            }
        }
    }

    /// Inverse of [`Self::to_tokens`] for a block of the same geometry as `like`
    /// but with `frames` frames.
    pub fn from_tokens(like: &Self, frames: usize, tokens: &Tensor<T>, provenance: Provenance) -> Result<Self> {
        let c = like.channels();
        match like.modality {
            Modality::Audio => {
                let t = tokens.clone().reshape(&[frames, c])?;
                Self::audio(t, provenance)
            }
            Modality::Video => {
                let s = like.shape();
                let (h, w) = (s[2], s[3]);
                let hw = h * w;
                if tokens.len() != frames * hw * c {
                    return Err(Error::Shape(format!(
                        "{} token values for {frames} frames of {c}x{h}x{w}",
                        tokens.len()
                    )));
                }
                let mut out = vec![T::zero(); c * frames * hw];
                let d = tokens.data();
                for ch in 0..c {
                    for f in 0..frames {
                        for cell in 0..hw {
                            out[(ch * frames + f) * hw + cell] = d[(f * hw + cell) * c + ch];
                        }
                    }
                }
                Self::video(Tensor::from_vec(&[c, frames, h, w], out)?, provenance)
            }
        }
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::Shape(format!("frames {start}..{} of {}", start + len, self.frames())));
        }
        let tokens = self.to_tokens();
        let per = self.cells() * self.channels();
        let sub = Tensor::from_vec(&[len * self.cells(), self.channels()], tokens.data()[start * per..(start + len) * per].to_vec())?;
        Self::from_tokens(self, len, &sub, self.provenance)
    }

    /// Concatenates along time. The result takes the first block's provenance
    /// unless provenances disagree, in which case it is `Derived`.
    pub fn concat_frames(blocks: &[&Self]) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut frames = 0;
        let mut prov = first.provenance;
        for b in blocks {
            if b.modality != first.modality || b.channels() != first.channels() || b.cells() != first.cells() {
                return Err(Error::Shape("incompatible blocks in concat".into()));
            }
            if b.provenance != prov {
                prov = Provenance::Derived;
            }
            data.extend_from_slice(b.to_tokens().data());
            frames += b.frames();
        }
        let tokens = Tensor::from_vec(&[frames * first.cells(), first.channels()], data)?;
        Self::from_tokens(first, frames, &tokens, prov)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { modality: self.modality, data: self.data.map(f), provenance: Provenance::Derived }
    }

    pub fn cast<U: Real>(&self) -> LatentBlock<U> {
        LatentBlock { modality: self.modality, data: self.data.cast(), provenance: self.provenance }
    }
}
