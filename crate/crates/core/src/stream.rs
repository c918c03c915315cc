//! Chunk-wise streaming inference: rollout state, latency accounting, pipeline
//! overlap and the long-horizon drift metric.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowcore::{self, noise_like, uniform_schedule};
use crate::latent::{LatentBlock, Provenance};
use crate::model::{predict_endpoint, ChunkContext, ChunkField, ModelConfig};
use crate::params::ParameterSet;
use crate::scalar::Real;
use crate::synthworld::{gen_sample, ToyCodec, WorldConfig, PIXEL_FPS};
use crate::tensor::Tensor;

/// Playback length of one 33-frame chunk at 24 fps.
pub const CHUNK_BUDGET_S: f64 = 33.0 / PIXEL_FPS;

/// Per-chunk stage durations in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDurations {
    pub generate_s: f64,
    pub decode_s: f64,
    pub preprocess_s: f64,
    pub write_s: f64,
}

impl StageDurations {
    /// Reference single-GPU accounting.
    pub const REFERENCE: Self = Self { generate_s: 0.96, decode_s: 0.30, preprocess_s: 0.05, write_s: 0.025 };

    pub fn sequential(&self) -> f64 {
        self.generate_s + self.decode_s + self.preprocess_s + self.write_s
    }

    /// Steady-state period with decode overlapping the next chunk's preprocessing.
    pub fn overlapped(&self) -> f64 {
        self.generate_s + self.decode_s.max(self.preprocess_s) + self.write_s
    }

    fn check(&self) -> Result<()> {
        let all = [self.generate_s, self.decode_s, self.preprocess_s, self.write_s];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Precondition(format!("stage durations must be non-negative: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub generate_s: f64,
    pub decode_s: f64,
    pub preprocess_s: f64,
    pub write_s: f64,
    pub wall_s: f64,
    pub budget_s: f64,
    pub real_time: bool,
}

impl LatencyRecord {
    pub fn new(stages: StageDurations, wall_s: f64) -> Self {
        Self {
            generate_s: stages.generate_s,
            decode_s: stages.decode_s,
            preprocess_s: stages.preprocess_s,
            write_s: stages.write_s,
            wall_s,
            budget_s: CHUNK_BUDGET_S,
            real_time: wall_s <= CHUNK_BUDGET_S,
        }
    }

    /// Record whose wall time is the plain sum of its stages.
    pub fn sequential(stages: StageDurations) -> Self {
        Self::new(stages, stages.sequential())
    }

    pub fn stages(&self) -> StageDurations {
        StageDurations {
            generate_s: self.generate_s,
            decode_s: self.decode_s,
            preprocess_s: self.preprocess_s,
            write_s: self.write_s,
        }
    }
}

/// Simulated per-chunk wall times (gaps between successive chunk completions).
///
/// Each chunk runs preprocess → generate → decode → write. With `overlap`,
/// the next chunk's preprocessing starts as soon as the current chunk's
/// latents are committed and runs alongside its decode; generation of the
/// next chunk starts once both have finished and the write is done.
pub fn schedule(stages: &[StageDurations], overlap: bool) -> Result<Vec<f64>> {
    for s in stages {
        s.check()?;
    }
    let mut out = Vec::with_capacity(stages.len());
    if !overlap {
        out.extend(stages.iter().map(StageDurations::sequential));
        return Ok(out);
    }
    let mut prev_done = 0.0;
    // Start of the current chunk's generation.
    let mut start = stages.first().map_or(0.0, |s| s.preprocess_s);
    for (k, s) in stages.iter().enumerate() {
        let committed = start + s.generate_s;
        let done = committed + s.decode_s + s.write_s;
        out.push(done - prev_done);
        prev_done = done;
        let next_pre = stages.get(k + 1).map_or(0.0, |n| n.preprocess_s);
        start = committed + s.decode_s.max(next_pre) + s.write_s;
    }
    Ok(out)
}

/// Largest gap between the mean of the final `probe_s` seconds of each
/// `segment_s` segment and the mean of the first `probe_s` seconds.
pub fn drift(quality: &[f64], segment_s: usize, probe_s: usize) -> Result<f64> {
    if segment_s == 0 || probe_s == 0 || probe_s > segment_s {
        return Err(Error::Precondition("drift needs 0 < probe_s ≤ segment_s".into()));
    }
    if quality.len() < segment_s {
        return Err(Error::Precondition(format!("series of {}s is shorter than one {segment_s}s segment", quality.len())));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let base = mean(&quality[..probe_s]);
    Ok((segment_s..=quality.len())
        .step_by(segment_s)
        .map(|e| (mean(&quality[e - probe_s..e]) - base).abs())
        .fold(0.0, f64::max))
}

/// Per-channel video statistics of the world, averaged over one-second windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frames_per_second: usize,
}

/// Per-channel mean and variance of each whole second of `video`.
pub fn second_stats<T: Real>(video: &LatentBlock<T>, frames_per_second: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (c, t, cells) = (video.channels(), video.frames(), video.cells());
    let d = video.tensor().data();
    (0..t / frames_per_second.max(1))
        .map(|s| {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let vals: Vec<f64> = (s * frames_per_second..(s + 1) * frames_per_second)
                    .flat_map(|f| (0..cells).map(move |cell| d[(ch * t + f) * cells + cell].as_f64()))
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                mean[ch] = m;
                var[ch] = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            }
            (mean, var)
        })
        .collect()
}

impl ReferenceStats {
    /// Averages per-second statistics over `n` world samples of `tokens` tokens each.
    pub fn from_world(world: &WorldConfig, n: usize, tokens: usize, seed: u64) -> Result<Self> {
        let fps = world.latent_video_fps.round() as usize;
        let c = world.video_channels;
        let (mut mean, mut var, mut count) = (vec![0.0; c], vec![0.0; c], 0usize);
        for i in 0..n {
            let s = gen_sample::<f64>(world, tokens, seed.wrapping_add(i as u64))?;
            for (m, v) in second_stats(&s.video, fps) {
                for ch in 0..c {
                    mean[ch] += m[ch];
                    var[ch] += v[ch];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Precondition("reference samples shorter than one second".into()));
        }
        mean.iter_mut().chain(var.iter_mut()).for_each(|x| *x /= count as f64);
        Ok(Self { mean, var, frames_per_second: fps })
    }
}

/// Per-second quality: negative RMS distance between each second's channel
/// mean/variance and the reference.
pub fn quality_proxy<T: Real>(video: &LatentBlock<T>, stats: &ReferenceStats) -> Vec<f64> {
    second_stats(video, stats.frames_per_second)
        .into_iter()
        .map(|(m, v)| {
            let c = m.len() as f64;
            let d: f64 = m.iter().zip(&stats.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                + v.iter().zip(&stats.var).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            -(d / c).sqrt()
        })
        .collect()
}

/// Recent generated audio, split into token-aligned segments so that
/// truncation drops whole tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBuffer<T> {
    audio: LatentBlock<T>,
    segments: Vec<usize>,
    cap_frames: usize,
}

impl<T: Real> HistoryBuffer<T> {
    pub fn new(channels: usize, cap_frames: usize) -> Self {
        Self { audio: LatentBlock::zeros_audio(0, channels).with_provenance(Provenance::Generated), segments: Vec::new(), cap_frames }
    }

    pub fn audio(&self) -> &LatentBlock<T> {
        &self.audio
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    pub fn frames(&self) -> usize {
        self.audio.frames()
    }

    pub fn cap_frames(&self) -> usize {
        self.cap_frames
    }

    /// Appends a chunk that moved the transcript cursor from `from` to `to`.
    /// Frames are attributed to tokens in proportion to the cursor advance; a
    /// chunk starting mid-token extends the last segment.
    pub fn push(&mut self, chunk: &LatentBlock<T>, from: f64, to: f64) -> Result<()> {
        let n = chunk.frames();
        let mut cuts = Vec::new();
        if to > from {
            let mut m = from.floor() + 1.0;
            while m < to {
                let off = (((m - from) / (to - from)) * n as f64).round() as usize;
                if off > 0 && off < n && cuts.last() != Some(&off) {
                    cuts.push(off);
                }
                m += 1.0;
            }
        }
        let mut pieces = Vec::with_capacity(cuts.len() + 1);
        let mut start = 0;
        for c in cuts.into_iter().chain(std::iter::once(n)) {
            if c > start {
                pieces.push(c - start);
            }
            start = c;
        }
        let continues = from.fract() > 0.0 && !self.segments.is_empty();
        for (i, len) in pieces.into_iter().enumerate() {
            if i == 0 && continues {
                *self.segments.last_mut().unwrap() += len;
            } else {
                self.segments.push(len);
            }
        }
        self.audio = LatentBlock::concat_frames(&[&self.audio, chunk])?.with_provenance(Provenance::Generated);
        self.truncate()
    }

    fn truncate(&mut self) -> Result<()> {
        let mut total = self.audio.frames();
        let mut drop = 0;
        while total > self.cap_frames && self.segments.len() - drop > 1 {
            total -= self.segments[drop];
            drop += 1;
        }
        self.segments.drain(..drop);
        if total > self.cap_frames {
            // A single token longer than the cap keeps only its newest frames.
            self.segments[0] -= total - self.cap_frames;
            total = self.cap_frames;
        }
        self.audio = self.audio.slice_frames(self.audio.frames() - total, total)?.with_provenance(Provenance::Generated);
        Ok(())
    }
}

/// Latents carried from one chunk to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionLatents<T> {
    pub video: LatentBlock<T>,
    pub audio: LatentBlock<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState<T> {
    pub sink: Option<LatentBlock<T>>,
    pub motion: Option<MotionLatents<T>>,
    pub history: HistoryBuffer<T>,
    pub cursor: f64,
    pub chunk_index: usize,
}

impl<T: Real> RolloutState<T> {
    pub fn new(audio_channels: usize, history_cap_frames: usize) -> Self {
        Self { sink: None, motion: None, history: HistoryBuffer::new(audio_channels, history_cap_frames), cursor: 0.0, chunk_index: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub sampling_steps: usize,
    pub sink: bool,
    pub use_cache: bool,
    pub overlap: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { sampling_steps: 4, sink: true, use_cache: true, overlap: true, seed: 0 }
    }
}

/// What the stream is asked to say and who says it.
#[derive(Clone, Debug)]
pub struct StreamRequest<T> {
    pub transcript: Vec<u32>,
    pub prompt: usize,
    pub reference: LatentBlock<T>,
    pub ref_audio: LatentBlock<T>,
}

impl<T: Real> StreamRequest<T> {
    /// Transcript, prompt and portraits of a world sample; its latents are not used.
    pub fn from_sample(s: &crate::synthworld::SynthSample<T>) -> Self {
        Self { transcript: s.tokens.clone(), prompt: s.prompt, reference: s.reference.clone(), ref_audio: s.reference_audio.clone() }
    }
}

/// One generated chunk.
#[derive(Clone, Debug)]
pub struct ChunkOutput<T> {
    pub index: usize,
    pub video: LatentBlock<T>,
    pub audio: LatentBlock<T>,
    /// Toy-codec pixels of `video`.
    pub frames: Tensor<T>,
    pub ctx: ChunkContext<T>,
    pub noise_v: LatentBlock<T>,
    pub noise_a: LatentBlock<T>,
    pub window_start: usize,
    /// Window-local endpoint predicted by the pointer.
    pub s_hat: f64,
    pub cursor_before: f64,
    pub cursor: f64,
    /// The pointer predicted a regression that was clamped away.
    pub clamped: bool,
    pub latency: LatencyRecord,
}

#[derive(Clone, Debug)]
pub enum StepOutcome<T> {
    Chunk(Box<ChunkOutput<T>>),
    EndOfStream,
}

/// Streaming engine over a fixed parameter set.
pub struct Streamer<'a, T: Real> {
    params: &'a ParameterSet<T>,
    cfg: &'a ModelConfig,
    scfg: StreamConfig,
    request: StreamRequest<T>,
    state: RolloutState<T>,
    codec: ToyCodec,
    rng: ChaCha8Rng,
    encodes_after_first: Option<usize>,
    prev_decode_s: f64,
}

impl<'a, T: Real> Streamer<'a, T> {
    pub fn new(world: &WorldConfig, params: &'a ParameterSet<T>, cfg: &'a ModelConfig, scfg: StreamConfig, request: StreamRequest<T>) -> Result<Self> {
        cfg.validate(world)?;
        if scfg.sampling_steps == 0 {
            return Err(Error::Config("sampling_steps must be ≥ 1".into()));
        }
        if let Some(&t) = request.transcript.iter().find(|&&t| t as usize >= world.vocab_size) {
            return Err(Error::Precondition(format!("token {t} outside the vocabulary")));
        }
        let codec = ToyCodec::new(world);
        // The portrait enters through the codec once, before the first chunk.
        let reference = codec.roundtrip(&request.reference)?.with_provenance(Provenance::GroundTruth);
        let request = StreamRequest { reference, ..request };
        let cap = cfg.geometry.history_cap_frames(world);
        Ok(Self {
            params,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(scfg.seed),
            scfg,
            state: RolloutState::new(cfg.denoiser.audio_channels, cap),
            request,
            codec,
            encodes_after_first: None,
            prev_decode_s: 0.0,
        })
    }

    pub fn state(&self) -> &RolloutState<T> {
        &self.state
    }

    pub fn transcript_len(&self) -> usize {
        self.request.transcript.len()
    }

    /// Codec encodes since the first chunk was committed.
    pub fn encodes_since_first_chunk(&self) -> usize {
        self.encodes_after_first.map_or(0, |base| self.codec.encode_calls() - base)
    }

    /// Conditioning for the next chunk.
    pub fn context(&self) -> ChunkContext<T> {
        let ws = self.state.cursor.floor() as usize;
        let n = self.request.transcript.len();
        let we = (ws + self.cfg.orchestrator.max_window).min(n);
        ChunkContext {
            prompt: self.request.prompt,
            reference: self.request.reference.clone(),
            ref_audio: self.request.ref_audio.clone(),
            sink: self.state.sink.clone(),
            motion: self.state.motion.as_ref().map(|m| m.video.slice_frames(m.video.frames() - self.cfg.geometry.motion_frames, self.cfg.geometry.motion_frames).unwrap()),
            window: self.request.transcript[ws.min(n)..we].to_vec(),
            history: self.state.history.audio().clone(),
            history_cap_frames: self.state.history.cap_frames(),
        }
    }

    /// Generates, decodes and commits one chunk.
    pub fn step(&mut self) -> Result<StepOutcome<T>> {
        let n = self.request.transcript.len();
        if self.state.cursor >= n as f64 {
            return Ok(StepOutcome::EndOfStream);
        }
        let t0 = Instant::now();
        let ctx = self.context();
        if self.state.chunk_index > 0 {
            let m = ctx.motion.as_ref().ok_or_else(|| Error::Precondition("missing motion latents".into()))?;
            if m.provenance != Provenance::Generated {
                return Err(Error::Precondition("motion latents must come from the previous generated chunk".into()));
            }
        }
        let mut field = ChunkField::new(self.params, self.cfg, &ctx, self.scfg.use_cache)?;
        let (like_v, like_a) = ctx.chunk_shapes(self.cfg);
        let noise_v = noise_like(&like_v, &mut self.rng).with_provenance(Provenance::Noise);
        let noise_a = noise_like(&like_a, &mut self.rng).with_provenance(Provenance::Noise);
        let preprocess_s = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let (video, audio) = flowcore::sample(&mut field, &noise_v, &noise_a, &uniform_schedule(self.scfg.sampling_steps))?;
        let ws = ctx.window.len();
        let window_start = self.state.cursor.floor() as usize;
        let s_hat = predict_endpoint(self.params, self.cfg, &ctx, &audio)?;
        if !s_hat.is_finite() {
            return Err(Error::NonFinite("pointer endpoint".into()));
        }
        let proposed = (window_start as f64 + s_hat.min(ws as f64)).min(n as f64);
        let clamped = proposed < self.state.cursor;
        let cursor_before = self.state.cursor;
        let cursor = proposed.max(cursor_before);

        // Commit point: the next chunk may start generating from here.
        if self.state.chunk_index == 0 && self.scfg.sink {
            self.state.sink = Some(video.clone());
        }
        self.state.history.push(&audio, cursor_before, cursor)?;
        self.state.motion = Some(MotionLatents { video: video.clone(), audio: audio.clone() });
        self.state.cursor = cursor;
        let generate_s = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let frames = self.codec.decode_video(&video)?;
        self.codec.decode_audio(&audio)?;
        let decode_s = t2.elapsed().as_secs_f64();

        let stages = StageDurations { generate_s, decode_s, preprocess_s, write_s: 0.0 };
        let latency = LatencyRecord::new(stages, self.wall(stages));
        self.prev_decode_s = decode_s;
        let index = self.state.chunk_index;
        self.state.chunk_index += 1;
        if self.encodes_after_first.is_none() {
            self.encodes_after_first = Some(self.codec.encode_calls());
        }
        Ok(StepOutcome::Chunk(Box::new(ChunkOutput {
            index,
            video,
            audio,
            frames,
            ctx,
            noise_v,
            noise_a,
            window_start,
            s_hat,
            cursor_before,
            cursor,
            clamped,
            latency,
        })))
    }

    /// Wall time of a chunk; with overlap its preprocessing hides behind the previous decode.
    fn wall(&self, s: StageDurations) -> f64 {
        if self.scfg.overlap && self.state.chunk_index > 0 {
            s.generate_s + s.decode_s + (s.preprocess_s - self.prev_decode_s).max(0.0) + s.write_s
        } else {
            s.sequential()
        }
    }

    /// Runs until `max_chunks` chunks or the end of the transcript.
    pub fn run(&mut self, max_chunks: usize, mut on_chunk: impl FnMut(&ChunkOutput<T>) -> Result<()>) -> Result<Vec<ChunkOutput<T>>> {
        let mut out = Vec::new();
        while out.len() < max_chunks {
            match self.step()? {
                StepOutcome::EndOfStream => break,
                StepOutcome::Chunk(c) => {
                    on_chunk(&c)?;
                    out.push(*c);
                }
            }
        }
        Ok(out)
    }
}

/// Video latents of consecutive chunks joined along time.
pub fn stream_video<T: Real>(chunks: &[ChunkOutput<T>]) -> Result<LatentBlock<T>> {
    LatentBlock::concat_frames(&chunks.iter().map(|c| &c.video).collect::<Vec<_>>())
}

pub fn stream_audio<T: Real>(chunks: &[ChunkOutput<T>]) -> Result<LatentBlock<T>> {
    LatentBlock::concat_frames(&chunks.iter().map(|c| &c.audio).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_drift(q: &[f64], seg: usize, probe: usize) -> f64 {
        let base: f64 = q[..probe].iter().sum::<f64>() / probe as f64;
        let mut best = 0.0f64;
        let mut e = seg;
        while e <= q.len() {
            let mut s = 0.0;
            for x in &q[e - probe..e] {
                s += x;
            }
            best = best.max((s / probe as f64 - base).abs());
            e += seg;
        }
        best
    }

    #[test]
    fn reference_accounting() {
        let r = StageDurations::REFERENCE;
        assert!((CHUNK_BUDGET_S - 1.375).abs() < 1e-15);
        assert!((r.sequential() - 1.335).abs() < 1e-12);
        assert!((r.overlapped() - 1.285).abs() < 1e-12);
        let rec = LatencyRecord::sequential(r);
        assert!(rec.real_time && rec.budget_s == CHUNK_BUDGET_S);
        assert!(!LatencyRecord::new(r, 1.4).real_time);
    }

    #[test]
    fn overlap_schedule_reaches_steady_state() {
        let r = StageDurations::REFERENCE;
        let walls = schedule(&[r; 6], true).unwrap();
        for w in &walls[1..5] {
            assert!((w - 1.285).abs() < 1e-12, "{w}");
        }
        assert!((walls[0] - (0.05 + 0.96 + 0.30 + 0.025)).abs() < 1e-12);
        let seq = schedule(&[r; 6], false).unwrap();
        assert!(seq.iter().all(|w| (w - 1.335).abs() < 1e-12));
        let z = StageDurations { decode_s: 0.0, preprocess_s: 0.0, ..r };
        let a = schedule(&[z; 3], true).unwrap();
        let b = schedule(&[z; 3], false).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12 && (x - 0.985).abs() < 1e-12));
        assert!(schedule(&[StageDurations { decode_s: -1.0, ..r }], true).is_err());
    }

    #[test]
    fn drift_examples() {
        assert_eq!(drift(&[0.3; 90], 30, 5).unwrap(), 0.0);
        let q: Vec<f64> = (0..90).map(|s| if s < 60 { 0.5 } else { 0.6 }).collect();
        assert!((drift(&q, 30, 5).unwrap() - 0.1).abs() < 1e-12);
        assert!(drift(&[0.0; 29], 30, 5).is_err());
        let q: Vec<f64> = (0..95).map(|i| ((i * 37 % 11) as f64).sin()).collect();
        assert_eq!(drift(&q, 30, 5).unwrap(), brute_drift(&q, 30, 5));
    }

    #[test]
    fn quality_prefers_unshifted_chunks() {
        let world = WorldConfig::default();
        let stats = ReferenceStats::from_world(&world, 50, 24, 100).unwrap();
        let s = gen_sample::<f64>(&world, 24, 5).unwrap();
        let q0 = quality_proxy(&s.video, &stats);
        assert_eq!(q0, quality_proxy(&s.video, &stats));
        let mut last = f64::INFINITY;
        for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let shifted = s.video.map(|x| x + shift + 5.0);
            let q = quality_proxy(&shifted, &stats)[0];
            assert!(q < last);
            last = q;
        }
    }

    #[test]
    fn history_buffer_respects_cap_and_segments() {
        let mut h = HistoryBuffer::<f64>::new(2, 10);
        let chunk = LatentBlock::zeros_audio(6, 2);
        h.push(&chunk, 0.0, 2.0).unwrap();
        assert_eq!(h.segments(), &[3, 3]);
        h.push(&chunk, 2.0, 2.5).unwrap();
        assert_eq!(h.segments(), &[3, 6]);
        assert_eq!(h.frames(), 9);
        h.push(&chunk, 2.5, 3.5).unwrap();
        assert_eq!(h.segments(), &[3]);
        assert!(h.frames() <= 10);
        h.push(&LatentBlock::zeros_audio(30, 2), 3.5, 3.6).unwrap();
        assert_eq!(h.frames(), 10);
        assert_eq!(h.segments().iter().sum::<usize>(), 10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stages() -> impl Strategy<Value = StageDurations> {
            (0.0..3.0, 0.0..1.0, 0.0..1.0, 0.0..0.2).prop_map(|(g, d, p, w)| StageDurations { generate_s: g, decode_s: d, preprocess_s: p, write_s: w })
        }

        proptest! {
            #[test]
            fn overlap_never_exceeds_sequential(st in prop::collection::vec(stages(), 1..16)) {
                let o = schedule(&st, true).unwrap();
                let s = schedule(&st, false).unwrap();
                prop_assert!((o[0] - s[0]).abs() < 1e-12);
                for (a, b) in o.iter().zip(&s) {
                    prop_assert!(*a <= b + 1e-12);
                    prop_assert!(*a >= 0.0);
                }
            }

            #[test]
            fn drift_matches_scan_and_ignores_offsets(
                q in prop::collection::vec(-1.0f64..1.0, 30..200),
                probe in 1usize..=30,
                c in -5.0f64..5.0,
            ) {
                let d = drift(&q, 30, probe).unwrap();
                prop_assert_eq!(d, brute_drift(&q, 30, probe));
                prop_assert!(d >= 0.0);
                let shifted: Vec<f64> = q.iter().map(|x| x + c).collect();
                prop_assert!((drift(&shifted, 30, probe).unwrap() - d).abs() < 1e-9);
            }

            #[test]
            fn history_stays_under_cap(pushes in prop::collection::vec((1usize..40, 0.0f64..3.0), 1..30), cap in 1usize..80) {
                let mut h = HistoryBuffer::<f64>::new(2, cap);
                let mut cursor = 0.0;
                for (frames, adv) in pushes {
                    h.push(&LatentBlock::zeros_audio(frames, 2), cursor, cursor + adv).unwrap();
                    cursor += adv;
                    prop_assert!(h.frames() <= cap);
                    prop_assert_eq!(h.segments().iter().sum::<usize>(), h.frames());
                    prop_assert_eq!(h.audio().frames(), h.frames());
                }
            }
        }
    }
}
