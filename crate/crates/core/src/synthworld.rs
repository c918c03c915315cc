//! Procedural character world: transcripts, coupled audio/video latents and
//! exact transcript-audio alignment.
//!
//! Every token id owns a "phonetic" signature expanded from a seeded hash, so
//! the same token always sounds the same. Video latents carry the character's
//! identity code, a per-stream scene offset that is not visible in the
//! reference portrait, and an EMA of audio energy modulating a mouth pattern.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentBlock, Provenance};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Audio latent frames per video latent frame.
pub const RATE_RATIO: usize = 4;
/// Pixel-domain frame rate the latent rate is derived from.
pub const PIXEL_FPS: f64 = 24.0;
/// Waveform sample rate the audio latent rate is derived from.
pub const AUDIO_SAMPLE_RATE: f64 = 49_152.0;
/// Temporal compression of the video codec.
pub const VIDEO_TEMPORAL_STRIDE: usize = 4;
/// Waveform samples per audio latent frame.
pub const AUDIO_HOP: usize = 2048;

/// Frames in the reference audio clip.
pub const REFERENCE_AUDIO_FRAMES: usize = 8;

const ENERGY_EMA: f64 = 0.5;
const ENERGY_GAIN: f64 = 3.0;
const SIGNATURE_VARIATION: f64 = 0.35;
const TIMBRE_SCALE: f64 = 0.3;
const SCENE_STD: f64 = 0.8;

const TAG_DURATION: u64 = 0x4455_5241;
const TAG_BASE: u64 = 0x4241_5345;
const TAG_FRAME: u64 = 0x4652_414d;
const TAG_PATTERN: u64 = 0x5041_5454;
const TAG_TIMBRE: u64 = 0x5449_4d42;
const TAG_GAIN: u64 = 0x4741_494e;
const TAG_REFAUDIO: u64 = 0x5245_4641;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub n_prompts: usize,
    pub video_channels: usize,
    pub video_spatial: (usize, usize),
    pub audio_channels: usize,
    pub latent_video_fps: f64,
    pub latent_audio_rate: f64,
    pub token_duration_range: (usize, usize),
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 24,
            n_prompts: 4,
            video_channels: 4,
            video_spatial: (2, 2),
            audio_channels: 4,
            latent_video_fps: PIXEL_FPS / VIDEO_TEMPORAL_STRIDE as f64,
            latent_audio_rate: AUDIO_SAMPLE_RATE / AUDIO_HOP as f64,
            token_duration_range: (3, 5),
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.vocab_size == 0 || self.n_prompts == 0 {
            return bad("vocab_size and n_prompts must be positive");
        }
        if self.video_channels == 0 || self.audio_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.video_spatial.0 == 0 || self.video_spatial.1 == 0 {
            return bad("spatial size must be positive");
        }
        if (self.latent_audio_rate - RATE_RATIO as f64 * self.latent_video_fps).abs() > 1e-9 {
            return bad("latent_audio_rate must be 4 × latent_video_fps");
        }
        let (lo, hi) = self.token_duration_range;
        if lo < 1 || hi < lo {
            return bad("token_duration_range must satisfy 1 ≤ min ≤ max");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.video_spatial.0 * self.video_spatial.1
    }

    /// Audio latent frames in `seconds` of speech.
    pub fn audio_frames_for(&self, seconds: f64) -> usize {
        (seconds * self.latent_audio_rate).floor() as usize
    }

    /// Unpadded duration of `token` in audio latent frames.
    pub fn token_duration(&self, token: u32) -> usize {
        let (lo, hi) = self.token_duration_range;
        lo + (hash_key(self.seed, &[TAG_DURATION, token as u64]) % (hi - lo + 1) as u64) as usize
    }

    /// Frame `j` of `token`'s phonetic signature (timbre not included).
    pub fn signature_frame(&self, token: u32, j: usize) -> Vec<f64> {
        (0..self.audio_channels)
            .map(|c| {
                hash_unit(self.seed, &[TAG_BASE, token as u64, c as u64])
                    + SIGNATURE_VARIATION * hash_unit(self.seed, &[TAG_FRAME, token as u64, j as u64, c as u64])
            })
            .collect()
    }

    /// The signature segment of `token` spoken for `duration` frames, `[duration × C_a]`.
    pub fn signature(&self, token: u32, duration: usize) -> Vec<Vec<f64>> {
        (0..duration).map(|j| self.signature_frame(token, j)).collect()
    }

    fn mouth_pattern(&self, c: usize, cell: usize) -> f64 {
        hash_unit(self.seed, &[TAG_PATTERN, c as u64, cell as u64])
    }

    pub fn prompt_gain(&self, prompt: usize) -> f64 {
        1.0 + 0.5 * hash_unit(self.seed, &[TAG_GAIN, prompt as u64])
    }

    pub fn timbre(&self, identity: &[f64]) -> Vec<f64> {
        let cv = identity.len() as f64;
        (0..self.audio_channels)
            .map(|c| {
                let s: f64 = identity
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| hash_unit(self.seed, &[TAG_TIMBRE, c as u64, k as u64]) * x)
                    .sum();
                TIMBRE_SCALE * s / cv.sqrt()
            })
            .collect()
    }

    /// Expected per-frame energy of a signature, used to centre the mouth signal.
    fn mean_energy(&self) -> f64 {
        (1.0 + SIGNATURE_VARIATION * SIGNATURE_VARIATION) / 3.0
    }
}

/// SplitMix64 finaliser.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn hash_key(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

/// Uniform value in `[-1, 1)` keyed by `(seed, parts)`.
pub fn hash_unit(seed: u64, parts: &[u64]) -> f64 {
    (hash_key(seed, parts) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<T> {
    pub tokens: Vec<u32>,
    pub durations: Vec<usize>,
    pub prompt: usize,
    pub audio: LatentBlock<T>,
    pub video: LatentBlock<T>,
    pub identity: Vec<T>,
    pub scene: Vec<T>,
    /// Single-frame portrait: the identity code broadcast spatially.
    pub reference: LatentBlock<T>,
    pub reference_audio: LatentBlock<T>,
}

impl<T: Real> SynthSample<T> {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// Generates one sample with `n_tokens` transcript tokens.
///
/// Durations are a hashed function of the token id; the final token is held
/// until the audio length is a multiple of [`RATE_RATIO`].
pub fn gen_sample<T: Real>(cfg: &WorldConfig, n_tokens: usize, rng_seed: u64) -> Result<SynthSample<T>> {
    cfg.validate()?;
    if n_tokens == 0 {
        return Err(Error::Precondition("n_tokens must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tokens: Vec<u32> = (0..n_tokens).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    let prompt = rng.gen_range(0..cfg.n_prompts);
    let identity: Vec<f64> = (0..cfg.video_channels).map(|_| rng.sample(StandardNormal)).collect();
    let scene: Vec<f64> = (0..cfg.video_channels)
        .map(|_| SCENE_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    world_render(cfg, &tokens, prompt, &identity, &scene)
}

/// Renders latents for an explicit transcript, prompt, identity and scene.
pub fn world_render<T: Real>(
    cfg: &WorldConfig,
    tokens: &[u32],
    prompt: usize,
    identity: &[f64],
    scene: &[f64],
) -> Result<SynthSample<T>> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::Precondition("empty transcript".into()));
    }
    let mut durations: Vec<usize> = tokens.iter().map(|&t| cfg.token_duration(t)).collect();
    let total: usize = durations.iter().sum();
    let pad = (RATE_RATIO - total % RATE_RATIO) % RATE_RATIO;
    *durations.last_mut().unwrap() += pad;
    let n_audio = total + pad;
    let ca = cfg.audio_channels;
    let timbre = cfg.timbre(identity);

    let mut audio = Vec::with_capacity(n_audio * ca);
    let mut energy = Vec::with_capacity(n_audio);
    for (&tok, &d) in tokens.iter().zip(&durations) {
        for j in 0..d {
            let sig = cfg.signature_frame(tok, j);
            energy.push(sig.iter().map(|x| x * x).sum::<f64>() / ca as f64);
            audio.extend(sig.iter().zip(&timbre).map(|(s, tb)| T::lit(s + tb)));
        }
    }

    let n_video = n_audio / RATE_RATIO;
    let (h, w) = cfg.video_spatial;
    let cells = h * w;
    let cv = cfg.video_channels;
    let gain = cfg.prompt_gain(prompt);
    let centre = cfg.mean_energy();
    let mut ema = Vec::with_capacity(n_video);
    for k in 0..n_video {
        let e = energy[k * RATE_RATIO..(k + 1) * RATE_RATIO].iter().sum::<f64>() / RATE_RATIO as f64;
        let prev = if k == 0 { e } else { ema[k - 1] };
        ema.push(ENERGY_EMA * prev + (1.0 - ENERGY_EMA) * e);
    }
    let mut video = vec![T::zero(); cv * n_video * cells];
    for c in 0..cv {
        for k in 0..n_video {
            for cell in 0..cells {
                let v = identity[c] + scene[c] + ENERGY_GAIN * gain * (ema[k] - centre) * cfg.mouth_pattern(c, cell);
                video[(c * n_video + k) * cells + cell] = T::lit(v);
            }
        }
    }

    let reference: Vec<T> = (0..cv).flat_map(|c| std::iter::repeat(T::lit(identity[c])).take(cells)).collect();
    let reference_audio: Vec<T> = (0..REFERENCE_AUDIO_FRAMES)
        .flat_map(|f| {
            let timbre = &timbre;
            (0..ca).map(move |c| {
                T::lit(timbre[c] + SIGNATURE_VARIATION * hash_unit(cfg.seed, &[TAG_REFAUDIO, f as u64, c as u64]))
            })
        })
        .collect();

    Ok(SynthSample {
        tokens: tokens.to_vec(),
        durations,
        prompt,
        audio: LatentBlock::audio(Tensor::from_vec(&[n_audio, ca], audio)?, Provenance::GroundTruth)?,
        video: LatentBlock::video(Tensor::from_vec(&[cv, n_video, h, w], video)?, Provenance::GroundTruth)?,
        identity: identity.iter().map(|&x| T::lit(x)).collect(),
        scene: scene.iter().map(|&x| T::lit(x)).collect(),
        reference: LatentBlock::video(Tensor::from_vec(&[cv, 1, h, w], reference)?, Provenance::GroundTruth)?,
        reference_audio: LatentBlock::audio(
            Tensor::from_vec(&[REFERENCE_AUDIO_FRAMES, ca], reference_audio)?,
            Provenance::GroundTruth,
        )?,
    })
}

/// Transcript position reached after `frame` audio frames: whole tokens spoken
/// plus the fraction of the active token.
pub fn position_at(durations: &[usize], frame: usize) -> f64 {
    let mut start = 0usize;
    for (i, &d) in durations.iter().enumerate() {
        if frame < start + d {
            return i as f64 + (frame - start) as f64 / d as f64;
        }
        start += d;
    }
    durations.len() as f64
}

/// Endpoint per chunk for chunks of `chunk_audio_frames`; the last chunk may be short.
pub fn endpoints_from_durations(durations: &[usize], chunk_audio_frames: usize) -> Result<Vec<f64>> {
    if chunk_audio_frames == 0 {
        return Err(Error::Precondition("chunk_audio_frames must be ≥ 1".into()));
    }
    let total: usize = durations.iter().sum();
    let mut out = Vec::new();
    let mut b = 0;
    while b < total {
        b = (b + chunk_audio_frames).min(total);
        out.push(position_at(durations, b));
    }
    Ok(out)
}

pub fn chunk_endpoints<T: Real>(sample: &SynthSample<T>, chunk_audio_frames: usize) -> Result<Vec<f64>> {
    endpoints_from_durations(&sample.durations, chunk_audio_frames)
}

/// Orthonormal columns `[rows × cols]`, `rows ≥ cols`, by Gram-Schmidt on a seeded Gaussian.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for i in 0..rows {
            out[i * cols + j] = col[i];
        }
    }
    out
}

/// Fixed linear stand-in for the audio and video autoencoders.
///
/// Video latent frame 0 decodes to one pixel frame and every later latent frame
/// to [`VIDEO_TEMPORAL_STRIDE`] frames, so `T` latents become `1 + (T − 1)·4`
/// frames. Channel maps use orthonormal columns, so `encode ∘ decode` is the
/// identity up to rounding.
#[derive(Debug)]
pub struct ToyCodec {
    video_channels: usize,
    pixel_channels: usize,
    video_basis: Vec<f64>,
    audio_channels: usize,
    audio_hop: usize,
    audio_basis: Vec<f64>,
    encode_calls: std::sync::atomic::AtomicUsize,
}

impl ToyCodec {
    pub fn new(cfg: &WorldConfig) -> Self {
        let pixel_channels = (2 * cfg.video_channels).max(3);
        let audio_hop = (2 * cfg.audio_channels).max(8);
        Self {
            video_channels: cfg.video_channels,
            pixel_channels,
            video_basis: orthonormal_columns(pixel_channels, cfg.video_channels, cfg.seed ^ 0x7669),
            audio_channels: cfg.audio_channels,
            audio_hop,
            audio_basis: orthonormal_columns(audio_hop, cfg.audio_channels, cfg.seed ^ 0x6175),
            encode_calls: Default::default(),
        }
    }

    pub fn pixel_frames(latent_frames: usize) -> usize {
        if latent_frames == 0 {
            0
        } else {
            1 + (latent_frames - 1) * VIDEO_TEMPORAL_STRIDE
        }
    }

    /// Number of `encode_*` invocations so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(std::sync::atomic::Ordering::Relaxed)
    }

    /// `[C, T, H, W]` latents → `[P, 1 + (T−1)·4, H, W]` toy pixels.
    pub fn decode_video<T: Real>(&self, block: &LatentBlock<T>) -> Result<Tensor<T>> {
        let s = block.shape();
        if s.len() != 4 || s[0] != self.video_channels {
            return Err(Error::Shape(format!("video codec expects {} channels, got {s:?}", self.video_channels)));
        }
        let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
        let cells = h * w;
        let p = self.pixel_channels;
        let tp = Self::pixel_frames(t);
        let d = block.tensor().data();
        let mut out = vec![T::zero(); p * tp * cells];
        for fp in 0..tp {
            let k = if fp == 0 { 0 } else { (fp - 1) / VIDEO_TEMPORAL_STRIDE + 1 };
            for cell in 0..cells {
                for pc in 0..p {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += self.video_basis[pc * c + ch] * d[(ch * t + k) * cells + cell].as_f64();
                    }
                    out[(pc * tp + fp) * cells + cell] = T::lit(acc);
                }
            }
        }
        Tensor::from_vec(&[p, tp, h, w], out)
    }

    pub fn encode_video<T: Real>(&self, pixels: &Tensor<T>) -> Result<LatentBlock<T>> {
        self.encode_calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let s = pixels.shape();
        if s.len() != 4 || s[0] != self.pixel_channels || s[1] == 0 || (s[1] - 1) % VIDEO_TEMPORAL_STRIDE != 0 {
            return Err(Error::Shape(format!("bad pixel block {s:?}")));
        }
        let (p, tp, h, w) = (s[0], s[1], s[2], s[3]);
        let cells = h * w;
        let t = 1 + (tp - 1) / VIDEO_TEMPORAL_STRIDE;
        let c = self.video_channels;
        let d = pixels.data();
        let mut out = vec![T::zero(); c * t * cells];
        for k in 0..t {
            let frames: Vec<usize> = if k == 0 {
                vec![0]
            } else {
                (1 + (k - 1) * VIDEO_TEMPORAL_STRIDE..1 + k * VIDEO_TEMPORAL_STRIDE).collect()
            };
            for cell in 0..cells {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &fp in &frames {
                        for pc in 0..p {
                            acc += self.video_basis[pc * c + ch] * d[(pc * tp + fp) * cells + cell].as_f64();
                        }
                    }
                    out[(ch * t + k) * cells + cell] = T::lit(acc / frames.len() as f64);
                }
            }
        }
        LatentBlock::video(Tensor::from_vec(&[c, t, h, w], out)?, Provenance::Derived)
    }

    /// `[T, C]` latents → `T · hop` waveform samples.
    pub fn decode_audio<T: Real>(&self, block: &LatentBlock<T>) -> Result<Vec<T>> {
        if block.shape().len() != 2 || block.channels() != self.audio_channels {
            return Err(Error::Shape(format!("audio codec expects {} channels", self.audio_channels)));
        }
        let (c, hop) = (self.audio_channels, self.audio_hop);
        let mut out = Vec::with_capacity(block.frames() * hop);
        for row in block.tensor().data().chunks(c) {
            for i in 0..hop {
                let acc: f64 = (0..c).map(|ch| self.audio_basis[i * c + ch] * row[ch].as_f64()).sum();
                out.push(T::lit(acc));
            }
        }
        Ok(out)
    }

    pub fn encode_audio<T: Real>(&self, wave: &[T]) -> Result<LatentBlock<T>> {
        self.encode_calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let (c, hop) = (self.audio_channels, self.audio_hop);
        if wave.len() % hop != 0 {
            return Err(Error::Shape(format!("waveform length {} not a multiple of {hop}", wave.len())));
        }
        let frames = wave.len() / hop;
        let mut out = Vec::with_capacity(frames * c);
        for seg in wave.chunks(hop) {
            for ch in 0..c {
                let acc: f64 = (0..hop).map(|i| self.audio_basis[i * c + ch] * seg[i].as_f64()).sum();
                out.push(T::lit(acc));
            }
        }
        LatentBlock::audio(Tensor::from_vec(&[frames, c], out)?, Provenance::Derived)
    }

    /// `encode(decode(block))`.
    pub fn roundtrip<T: Real>(&self, block: &LatentBlock<T>) -> Result<LatentBlock<T>> {
        match block.modality() {
            crate::latent::Modality::Video => self.encode_video(&self.decode_video(block)?),
            crate::latent::Modality::Audio => self.encode_audio(&self.decode_audio(block)?),
        }
    }
}

/// Round trip through a codec built for `cfg`.
pub fn toy_codec_roundtrip<T: Real>(cfg: &WorldConfig, block: &LatentBlock<T>) -> Result<LatentBlock<T>> {
    ToyCodec::new(cfg).roundtrip(block)
}

const SCW_MAGIC: &[u8; 4] = b"SCW1";
const SCW_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn put_f32s<T: Real>(w: &mut impl Write, xs: &[T]) -> Result<()> {
    put_u32(w, xs.len() as u32)?;
    for &x in xs {
        w.write_all(&x.as_f32().to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_f32s<T: Real>(r: &mut impl Read, expect: usize) -> Result<Vec<T>> {
    let n = get_u32(r)? as usize;
    if n != expect {
        return Err(Error::Format { what: "SCW1 record", detail: format!("array of {n}, expected {expect}") });
    }
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(T::from_f32_storage(f32::from_le_bytes(b)));
    }
    Ok(out)
}

/// Writes a sample record.
///
/// Layout (little-endian): `SCW1`, version u32, config (vocab u32, prompts u32,
/// C_v u32, H u32, W u32, C_a u32, fps f64, audio rate f64, dmin u32, dmax u32,
/// seed u64), n_tokens u32, prompt u32, tokens u32×n, durations u32×n, then
/// f32 arrays (each prefixed by its u32 length): audio `[T_a, C_a]`, video
/// `[C_v, T_v, H, W]`, identity, scene, reference, reference audio.
pub fn write_sample<T: Real>(w: &mut impl Write, cfg: &WorldConfig, s: &SynthSample<T>) -> Result<()> {
    w.write_all(SCW_MAGIC)?;
    put_u32(w, SCW_VERSION)?;
    for x in [cfg.vocab_size, cfg.n_prompts, cfg.video_channels, cfg.video_spatial.0, cfg.video_spatial.1, cfg.audio_channels] {
        put_u32(w, x as u32)?;
    }
    w.write_all(&cfg.latent_video_fps.to_bits().to_le_bytes())?;
    w.write_all(&cfg.latent_audio_rate.to_bits().to_le_bytes())?;
    put_u32(w, cfg.token_duration_range.0 as u32)?;
    put_u32(w, cfg.token_duration_range.1 as u32)?;
    w.write_all(&cfg.seed.to_le_bytes())?;
    put_u32(w, s.tokens.len() as u32)?;
    put_u32(w, s.prompt as u32)?;
    for &t in &s.tokens {
        put_u32(w, t)?;
    }
    for &d in &s.durations {
        put_u32(w, d as u32)?;
    }
    put_f32s(w, s.audio.tensor().data())?;
    put_f32s(w, s.video.tensor().data())?;
    put_f32s(w, &s.identity)?;
    put_f32s(w, &s.scene)?;
    put_f32s(w, s.reference.tensor().data())?;
    put_f32s(w, s.reference_audio.tensor().data())?;
    Ok(())
}

pub fn read_sample<T: Real>(r: &mut impl Read) -> Result<(WorldConfig, SynthSample<T>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SCW_MAGIC {
        return Err(Error::Format { what: "SCW1 record", detail: "bad magic".into() });
    }
    let version = get_u32(r)?;
    if version != SCW_VERSION {
        return Err(Error::Format { what: "SCW1 record", detail: format!("unsupported version {version}") });
    }
    let mut u = [0usize; 6];
    for x in u.iter_mut() {
        *x = get_u32(r)? as usize;
    }
    let cfg = WorldConfig {
        vocab_size: u[0],
        n_prompts: u[1],
        video_channels: u[2],
        video_spatial: (u[3], u[4]),
        audio_channels: u[5],
        latent_video_fps: get_f64(r)?,
        latent_audio_rate: get_f64(r)?,
        token_duration_range: (get_u32(r)? as usize, get_u32(r)? as usize),
        seed: get_u64(r)?,
    };
    cfg.validate()?;
    let n = get_u32(r)? as usize;
    let prompt = get_u32(r)? as usize;
    let tokens = (0..n).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let durations = (0..n).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let ta: usize = durations.iter().sum();
    if ta % RATE_RATIO != 0 {
        return Err(Error::Format { what: "SCW1 record", detail: "audio length not a multiple of 4".into() });
    }
    let (ca, cv, (h, w)) = (cfg.audio_channels, cfg.video_channels, cfg.video_spatial);
    let tv = ta / RATE_RATIO;
    let audio = get_f32s(r, ta * ca)?;
    let video = get_f32s(r, cv * tv * h * w)?;
    let identity = get_f32s(r, cv)?;
    let scene = get_f32s(r, cv)?;
    let reference = get_f32s(r, cv * h * w)?;
    let reference_audio = get_f32s(r, REFERENCE_AUDIO_FRAMES * ca)?;
    let sample = SynthSample {
        tokens,
        durations,
        prompt,
        audio: LatentBlock::audio(Tensor::from_vec(&[ta, ca], audio)?, Provenance::GroundTruth)?,
        video: LatentBlock::video(Tensor::from_vec(&[cv, tv, h, w], video)?, Provenance::GroundTruth)?,
        identity,
        scene,
        reference: LatentBlock::video(Tensor::from_vec(&[cv, 1, h, w], reference)?, Provenance::GroundTruth)?,
        reference_audio: LatentBlock::audio(
            Tensor::from_vec(&[REFERENCE_AUDIO_FRAMES, ca], reference_audio)?,
            Provenance::GroundTruth,
        )?,
    };
    Ok((cfg, sample))
}

/// Nearest-signature decoding.
///
/// Segments `audio` (after removing `timbre`) into vocabulary signatures of
/// their natural durations, letting the final token hold for up to
/// `RATE_RATIO − 1` extra frames, and returns the minimum squared-error token
/// sequence found by dynamic programming. Returns an empty sequence when the
/// frame count admits no segmentation.
pub fn decode_transcript<T: Real>(cfg: &WorldConfig, audio: &LatentBlock<T>, timbre: &[f64]) -> Vec<u32> {
    let ca = cfg.audio_channels;
    let frames = audio.frames();
    let x: Vec<f64> = audio
        .tensor()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64() - timbre[i % ca])
        .collect();
    let vocab: Vec<(u32, usize, Vec<Vec<f64>>)> = (0..cfg.vocab_size as u32)
        .map(|v| {
            let d = cfg.token_duration(v);
            (v, d, cfg.signature(v, d + RATE_RATIO - 1))
        })
        .collect();
    let seg_err = |f: usize, sig: &[Vec<f64>], len: usize| -> f64 {
        (0..len)
            .map(|j| (0..ca).map(|c| (x[(f + j) * ca + c] - sig[j][c]).powi(2)).sum::<f64>())
            .sum()
    };
    let mut best = vec![f64::INFINITY; frames + 1];
    let mut back = vec![(0usize, 0u32); frames + 1];
    best[0] = 0.0;
    for f in 0..frames {
        if !best[f].is_finite() {
            continue;
        }
        for (v, d, sig) in &vocab {
            for len in *d..*d + RATE_RATIO {
                let end = f + len;
                if end > frames || (len > *d && end != frames) {
                    continue;
                }
                let c = best[f] + seg_err(f, sig, len);
                if c < best[end] {
                    best[end] = c;
                    back[end] = (f, *v);
                }
            }
        }
    }
    if !best[frames].is_finite() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut f = frames;
    while f > 0 {
        let (prev, v) = back[f];
        out.push(v);
        f = prev;
    }
    out.reverse();
    out
}
