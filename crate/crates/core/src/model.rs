//! The assembled generator: orchestrator, denoiser and pointer sharing one
//! parameter set, plus the per-chunk conditioning they consume.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowcore::{self, VelocityField};
use crate::jointnet::{self, DenoiserConfig, KvCache, PackedSequence};
use crate::latent::{LatentBlock, Provenance};
use crate::orchestrator::{self, OrchestratorConfig, OrchestratorInput};
use crate::pap::{self, PapConfig, PointerVars};
use crate::params::{Bound, ParameterSet};
use crate::scalar::Real;
use crate::synthworld::{WorldConfig, RATE_RATIO};

/// Chunk sizes in latent frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkGeometry {
    pub video_frames: usize,
    pub motion_frames: usize,
    pub history_seconds: f64,
}

impl Default for ChunkGeometry {
    fn default() -> Self {
        Self { video_frames: 9, motion_frames: 9, history_seconds: 15.0 }
    }
}

impl ChunkGeometry {
    pub fn audio_frames(&self) -> usize {
        self.video_frames * RATE_RATIO
    }

    pub fn history_cap_frames(&self, world: &WorldConfig) -> usize {
        world.audio_frames_for(self.history_seconds)
    }

    /// Playback length of one chunk in seconds.
    pub fn seconds(&self, world: &WorldConfig) -> f64 {
        self.video_frames as f64 / world.latent_video_fps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub orchestrator: OrchestratorConfig,
    pub pap: PapConfig,
    pub geometry: ChunkGeometry,
}

impl ModelConfig {
    /// Sizes every component for `world` at width `dim`.
    pub fn for_world(world: &WorldConfig, dim: usize) -> Self {
        let heads = if dim >= 16 { 2 } else { 1 };
        let geometry = ChunkGeometry::default();
        Self {
            denoiser: DenoiserConfig {
                model_dim: dim,
                n_heads: heads,
                head_dim: dim / heads,
                expert_hidden: 2 * dim,
                video_channels: world.video_channels,
                audio_channels: world.audio_channels,
                cells: world.cells(),
                n_prompts: world.n_prompts,
                cond_dim: dim,
                ..DenoiserConfig::default()
            },
            orchestrator: OrchestratorConfig {
                dim,
                n_heads: heads,
                head_dim: dim / heads,
                ffn_hidden: 2 * dim,
                vocab_size: world.vocab_size,
                n_prompts: world.n_prompts,
                audio_channels: world.audio_channels,
                ..OrchestratorConfig::default()
            },
            pap: PapConfig {
                input_dim: dim,
                attn_dim: dim / 2,
                hidden: dim,
                max_window: 40,
                max_frames: geometry.audio_frames(),
                ..PapConfig::default()
            },
            geometry,
        }
    }

    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        world.validate()?;
        self.denoiser.validate()?;
        self.orchestrator.validate()?;
        let d = &self.denoiser;
        let o = &self.orchestrator;
        let g = &self.geometry;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if d.video_channels != world.video_channels || d.audio_channels != world.audio_channels || d.cells != world.cells() {
            return bad("denoiser io sizes differ from the world");
        }
        if d.n_prompts != world.n_prompts || o.n_prompts != world.n_prompts || o.vocab_size != world.vocab_size {
            return bad("prompt or vocabulary sizes differ from the world");
        }
        if o.audio_channels != world.audio_channels {
            return bad("orchestrator audio channels differ from the world");
        }
        if d.cond_dim != o.dim || self.pap.input_dim != o.dim {
            return bad("c_a width must equal the orchestrator width");
        }
        if self.pap.max_window < o.max_window || self.pap.max_frames < g.audio_frames() {
            return bad("pointer tables are smaller than the transcript window or chunk");
        }
        if g.video_frames == 0 || g.motion_frames == 0 || g.motion_frames > g.video_frames {
            return bad("chunk geometry needs 1 ≤ motion_frames ≤ video_frames");
        }
        if g.history_seconds <= 0.0 {
            return bad("history cap must be positive");
        }
        if self.pap.beta <= 0.0 {
            return bad("pointer beta must be positive");
        }
        Ok(())
    }
}

/// Fresh parameters for all three components.
pub fn init_params<T: Real>(cfg: &ModelConfig) -> Result<ParameterSet<T>> {
    let mut ps = jointnet::init_params(&cfg.denoiser)?;
    ps.merge(&orchestrator::init_params(&cfg.orchestrator)?);
    ps.merge(&pap::init_params(&cfg.pap));
    Ok(ps)
}

pub fn is_denoiser_param(name: &str) -> bool {
    name.starts_with("dit.")
}

/// Everything a chunk is conditioned on apart from its own noisy latents.
#[derive(Clone, Debug)]
pub struct ChunkContext<T> {
    pub prompt: usize,
    pub reference: LatentBlock<T>,
    pub ref_audio: LatentBlock<T>,
    pub sink: Option<LatentBlock<T>>,
    pub motion: Option<LatentBlock<T>>,
    /// Transcript tokens from the cursor's token onward.
    pub window: Vec<u32>,
    pub history: LatentBlock<T>,
    pub history_cap_frames: usize,
}

impl<T: Real> ChunkContext<T> {
    pub fn orchestrator_input(&self, x_a: LatentBlock<T>, t: T) -> OrchestratorInput<T> {
        OrchestratorInput {
            ref_audio: self.ref_audio.clone(),
            prompt: Some(self.prompt),
            transcript: self.window.clone(),
            history_audio: self.history.clone(),
            x_t_a: x_a,
            t,
            history_cap_frames: self.history_cap_frames,
        }
    }

    /// Latent shapes of one chunk.
    pub fn chunk_shapes(&self, cfg: &ModelConfig) -> (LatentBlock<T>, LatentBlock<T>) {
        let s = self.reference.shape();
        (
            LatentBlock::zeros_video(s[0], cfg.geometry.video_frames, s[2], s[3]),
            LatentBlock::zeros_audio(cfg.geometry.audio_frames(), cfg.denoiser.audio_channels),
        )
    }

    /// Packs the denoiser sequence around placeholder noisy latents.
    pub fn pack(&self, cfg: &ModelConfig, x_v: &LatentBlock<T>, x_a: &LatentBlock<T>) -> Result<PackedSequence<T>> {
        jointnet::pack(&cfg.denoiser, Some(self.prompt), &self.reference, self.motion.as_ref(), self.sink.as_ref(), x_v, x_a)
    }
}

/// Joint velocity `(f^v, f^a)` as token matrices: orchestrator at `(x_a, t)`
/// produces `c_a`, then the denoiser runs on `(x_v, x_a)`.
#[allow(clippy::too_many_arguments)]
pub fn velocity<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    ctx: &ChunkContext<T>,
    seq: &PackedSequence<T>,
    x_v: Var,
    x_a: Var,
    t: T,
    cache: Option<&KvCache<T>>,
) -> Result<(Var, Var, KvCache<T>)> {
    let shape_a = LatentBlock::audio(g.tensor(x_a), Provenance::Derived)?;
    let input = ctx.orchestrator_input(shape_a, t);
    let orch = orchestrator::condition(g, p, &cfg.orchestrator, &input, Some(x_a))?;
    let out = jointnet::forward(g, p, &cfg.denoiser, seq, Some((x_v, x_a)), orch.c_a, t, cache)?;
    Ok((out.f_v, out.f_a, out.cache))
}

/// Pointer evaluated on a clean chunk of audio (orchestrator at `t = 0`).
pub fn pointer_on<T: Real>(g: &Graph<T>, p: &Bound, cfg: &ModelConfig, ctx: &ChunkContext<T>, audio: Var) -> Result<PointerVars> {
    let block = LatentBlock::audio(g.tensor(audio), Provenance::Derived)?;
    let input = ctx.orchestrator_input(block, T::zero());
    let orch = orchestrator::condition(g, p, &cfg.orchestrator, &input, Some(audio))?;
    pap::pointer(g, p, &cfg.pap, orch.transcript_states, orch.c_a)
}

/// Window-local endpoint `ŝ` for a chunk of audio.
pub fn predict_endpoint<T: Real>(params: &ParameterSet<T>, cfg: &ModelConfig, ctx: &ChunkContext<T>, audio: &LatentBlock<T>) -> Result<f64> {
    let g = Graph::new();
    let p = Bound::new(&g, params, false);
    let a = g.constant(audio.tensor().clone());
    Ok(g.scalar(pointer_on(&g, &p, cfg, ctx, a)?.s_hat).as_f64())
}

/// Inference-time velocity field over a fixed context, reusing the
/// condition KV cache across calls when enabled.
pub struct ChunkField<'a, T: Real> {
    pub params: &'a ParameterSet<T>,
    pub cfg: &'a ModelConfig,
    pub ctx: &'a ChunkContext<T>,
    pub seq: PackedSequence<T>,
    pub use_cache: bool,
    pub calls: usize,
    cache: Option<KvCache<T>>,
}

impl<'a, T: Real> ChunkField<'a, T> {
    pub fn new(params: &'a ParameterSet<T>, cfg: &'a ModelConfig, ctx: &'a ChunkContext<T>, use_cache: bool) -> Result<Self> {
        let (v, a) = ctx.chunk_shapes(cfg);
        let seq = ctx.pack(cfg, &v, &a)?;
        Ok(Self { params, cfg, ctx, seq, use_cache, calls: 0, cache: None })
    }
}

impl<T: Real> VelocityField<T> for ChunkField<'_, T> {
    fn velocity(&mut self, x_v: &LatentBlock<T>, x_a: &LatentBlock<T>, t: T) -> Result<(LatentBlock<T>, LatentBlock<T>)> {
        let g = Graph::new();
        let p = Bound::new(&g, self.params, false);
        let (vx, va) = (g.constant(x_v.to_tokens()), g.constant(x_a.to_tokens()));
        let cache = if self.use_cache { self.cache.as_ref() } else { None };
        let (fv, fa, cache) = velocity(&g, &p, self.cfg, self.ctx, &self.seq, vx, va, t, cache)?;
        if self.use_cache {
            self.cache = Some(cache);
        }
        self.calls += 1;
        let (fv, fa) = (g.tensor(fv), g.tensor(fa));
        if !(fv.is_finite() && fa.is_finite()) {
            return Err(Error::NonFinite(format!("velocity at t = {t}")));
        }
        self.seq.unpack(&fv, &fa)
    }
}

/// Samples one chunk from noise with an Euler schedule.
pub fn sample_chunk<T: Real>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    ctx: &ChunkContext<T>,
    noise_v: &LatentBlock<T>,
    noise_a: &LatentBlock<T>,
    schedule: &[f64],
) -> Result<(LatentBlock<T>, LatentBlock<T>)> {
    let mut field = ChunkField::new(params, cfg, ctx, true)?;
    flowcore::sample(&mut field, noise_v, noise_a, schedule)
}
