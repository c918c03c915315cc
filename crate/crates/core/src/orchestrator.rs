//! Causal orchestrator producing the frame-aligned audio condition `c_a`.
//!
//! The sequence is always `[e_ref, E_txt, e_hist, E_cond(t)]`: reference audio
//! frames, prompt and transcript tokens, history audio frames and finally one
//! token per noisy audio frame of the current chunk. `c_a` is read from the
//! last-layer states of that cond tail.

use std::ops::Range;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::latent::{LatentBlock, Modality};
use crate::layers::{self, linear, norm};
use crate::params::{Bound, Init, ParameterSet};
use crate::rope::{rotary_table, PositionAssignment, RopeConfig};
use crate::scalar::Real;
use crate::tokens::{block_tokens, Role, TokenStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub n_prompts: usize,
    pub audio_channels: usize,
    /// Transcript tokens visible per chunk, starting at the cursor.
    pub max_window: usize,
    pub seed: u64,
    pub rope: RopeConfig,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_heads: 2,
            head_dim: 16,
            n_blocks: 2,
            ffn_hidden: 64,
            vocab_size: 24,
            n_prompts: 4,
            audio_channels: 4,
            max_window: 40,
            seed: 13,
            rope: RopeConfig::default(),
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("orchestrator: {m}")));
        if self.dim != self.n_heads * self.head_dim || self.head_dim % 2 != 0 {
            return bad("dim must equal n_heads × head_dim with an even head_dim");
        }
        if self.n_blocks == 0 || self.vocab_size == 0 || self.n_prompts == 0 || self.max_window == 0 {
            return bad("n_blocks, vocab_size, n_prompts and max_window must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OrchestratorInput<T> {
    pub ref_audio: LatentBlock<T>,
    pub prompt: Option<usize>,
    pub transcript: Vec<u32>,
    pub history_audio: LatentBlock<T>,
    pub x_t_a: LatentBlock<T>,
    pub t: T,
    pub history_cap_frames: usize,
}

/// Embedded orchestrator sequence.
pub struct OrchestratorSequence {
    pub tokens: TokenStream,
    pub embeddings: Var,
    /// Rows holding transcript tokens (prompt excluded).
    pub transcript_rows: Range<usize>,
    pub cond_rows: Range<usize>,
}

pub struct OrchestratorOutput {
    /// `[chunk audio frames, dim]`.
    pub c_a: Var,
    /// Transcript states `A`, `[transcript len, dim]`.
    pub transcript_states: Var,
    pub hidden: Var,
}

/// Lower-triangular permissions.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

/// Embeds and concatenates the four blocks in their fixed order. `x_t_a`
/// overrides the input's noisy audio with a graph variable.
pub fn pack_sequence<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &OrchestratorConfig,
    input: &OrchestratorInput<T>,
    x_t_a: Option<Var>,
) -> Result<OrchestratorSequence> {
    if input.history_audio.frames() > input.history_cap_frames {
        return Err(Error::Precondition(format!(
            "history holds {} frames, cap is {}; truncate first",
            input.history_audio.frames(),
            input.history_cap_frames
        )));
    }
    for b in [&input.ref_audio, &input.history_audio, &input.x_t_a] {
        if b.modality() != Modality::Audio || b.channels() != cfg.audio_channels {
            return Err(Error::Shape(format!("orchestrator expects audio [T, {}], got {:?}", cfg.audio_channels, b.shape())));
        }
    }
    if input.transcript.len() > cfg.max_window {
        return Err(Error::Precondition(format!("transcript window of {} exceeds {}", input.transcript.len(), cfg.max_window)));
    }
    if let Some(&bad) = input.transcript.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Precondition(format!("token {bad} outside vocabulary")));
    }
    if input.prompt.is_some_and(|q| q >= cfg.n_prompts) {
        return Err(Error::Precondition("prompt id out of range".into()));
    }
    if !(input.t >= T::zero() && input.t <= T::one()) {
        return Err(Error::Precondition("t outside [0, 1]".into()));
    }
    let role_emb = p.get("orch.role_emb");
    let role = |r: Role| g.slice_rows(role_emb, r.id(), 1);
    let n_prompt = usize::from(input.prompt.is_some());

    let mut tokens = block_tokens(Role::Reference, Modality::Audio, input.ref_audio.frames(), 1);
    tokens.extend(block_tokens(Role::Text, Modality::Video, n_prompt, 1));
    tokens.extend(block_tokens(Role::Text, Modality::Audio, input.transcript.len(), 1));
    tokens.extend(block_tokens(Role::History, Modality::Audio, input.history_audio.frames(), 1));
    tokens.extend(block_tokens(Role::CondTail, Modality::Audio, input.x_t_a.frames(), 1));

    let mut parts = Vec::with_capacity(5);
    let e_ref = linear(g, p, "orch.audio_in", g.constant(input.ref_audio.tensor().clone()));
    parts.push(g.add_row(e_ref, role(Role::Reference)));
    if let Some(q) = input.prompt {
        let e = g.gather_rows(p.get("orch.prompt_emb"), Rc::new(vec![q]));
        parts.push(g.add_row(e, role(Role::Text)));
    }
    if !input.transcript.is_empty() {
        let ids = Rc::new(input.transcript.iter().map(|&t| t as usize).collect());
        let e = g.gather_rows(p.get("orch.text_emb"), ids);
        parts.push(g.add_row(e, role(Role::Text)));
    }
    if !input.history_audio.is_empty() {
        let e = linear(g, p, "orch.audio_in", g.constant(input.history_audio.tensor().clone()));
        parts.push(g.add_row(e, role(Role::History)));
    }
    let xa = match x_t_a {
        Some(v) => {
            if g.shape(v) != (input.x_t_a.frames(), cfg.audio_channels) {
                return Err(Error::Shape("x_t_a override shape".into()));
            }
            v
        }
        None => g.constant(input.x_t_a.tensor().clone()),
    };
    let temb = layers::timestep_embedding(g, p, "orch.time", input.t, cfg.dim);
    let e_cond = g.add_row(g.add_row(linear(g, p, "orch.cond_in", xa), temb), role(Role::CondTail));
    parts.push(e_cond);

    let r0 = input.ref_audio.frames() + n_prompt;
    let transcript_rows = r0..r0 + input.transcript.len();
    let c0 = transcript_rows.end + input.history_audio.frames();
    let cond_rows = c0..c0 + input.x_t_a.frames();
    Ok(OrchestratorSequence { tokens, embeddings: g.concat_rows(&parts), transcript_rows, cond_rows })
}

/// Rotary positions: reference and text count up from 0, the cond tail starts
/// at a fixed index past the longest possible history and the history is
/// right-aligned against it, so text-to-tail distances do not depend on how
/// much history is present.
pub fn positions(seq: &OrchestratorSequence, max_window: usize, history_cap_frames: usize) -> Vec<PositionAssignment> {
    let tail = (seq.transcript_rows.start + max_window + history_cap_frames) as i64;
    let hist_len = (seq.cond_rows.start - seq.transcript_rows.end) as i64;
    let at = |i: i64| PositionAssignment { temporal_index: i, modality: Modality::Video, base_frequency_scale: 1.0 };
    (0..seq.tokens.len())
        .map(|r| {
            let r = r as i64;
            let (te, cs) = (seq.transcript_rows.end as i64, seq.cond_rows.start as i64);
            if r < te {
                at(r)
            } else if r < cs {
                at(tail - hist_len + (r - te))
            } else {
                at(tail + (r - cs))
            }
        })
        .collect()
}

/// Runs the causal transformer and reads `c_a` off the cond tail.
pub fn condition<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &OrchestratorConfig,
    input: &OrchestratorInput<T>,
    x_t_a: Option<Var>,
) -> Result<OrchestratorOutput> {
    let seq = pack_sequence(g, p, cfg, input, x_t_a)?;
    let n = seq.tokens.len();
    let mask = causal_mask(n);
    let rot = rotary_table(&cfg.rope, &positions(&seq, cfg.max_window, input.history_cap_frames), cfg.head_dim);
    let mut h = seq.embeddings;
    for b in 0..cfg.n_blocks {
        h = layers::dense_block(g, p, &format!("orch.b{b}"), h, Some(&rot), Some(&mask), cfg.n_heads, cfg.head_dim);
    }
    let h = norm(g, p, "orch.norm", h);
    let c_a = g.slice_rows(h, seq.cond_rows.start, seq.cond_rows.len());
    let transcript_states = g.slice_rows(h, seq.transcript_rows.start, seq.transcript_rows.len());
    Ok(OrchestratorOutput { c_a, transcript_states, hidden: h })
}

pub fn init_params<T: Real>(cfg: &OrchestratorConfig) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    let mut init = Init::new(cfg.seed);
    let d = cfg.dim;
    layers::init_linear(&mut ps, &mut init, "orch.audio_in", cfg.audio_channels, d);
    layers::init_linear(&mut ps, &mut init, "orch.cond_in", cfg.audio_channels, d);
    ps.insert("orch.text_emb", init.normal(&[cfg.vocab_size, d], 0.5));
    ps.insert("orch.prompt_emb", init.normal(&[cfg.n_prompts, d], 0.5));
    ps.insert("orch.role_emb", init.normal(&[Role::ALL.len(), d], 0.5));
    layers::init_linear(&mut ps, &mut init, "orch.time.fc1", d, d);
    layers::init_linear(&mut ps, &mut init, "orch.time.fc2", d, d);
    for b in 0..cfg.n_blocks {
        layers::init_dense_block(&mut ps, &mut init, &format!("orch.b{b}"), d, cfg.ffn_hidden, false);
    }
    layers::init_gain(&mut ps, "orch.norm", d);
    Ok(ps)
}

/// Drops the oldest whole tokens until the history fits in `cap_frames`.
///
/// `durations[i]` is the number of audio frames attributed to `transcript[i]`;
/// the retained transcript stays aligned with the retained audio suffix.
pub fn truncate_history<T: Real>(
    audio: &LatentBlock<T>,
    transcript: &[u32],
    durations: &[usize],
    cap_frames: usize,
) -> Result<(LatentBlock<T>, Vec<u32>, Vec<usize>)> {
    if transcript.len() != durations.len() || durations.iter().sum::<usize>() != audio.frames() {
        return Err(Error::Precondition(format!(
            "misaligned history: {} tokens, {} durations summing to {}, {} audio frames",
            transcript.len(),
            durations.len(),
            durations.iter().sum::<usize>(),
            audio.frames()
        )));
    }
    let mut total = audio.frames();
    let mut drop = 0;
    while total > cap_frames {
        total -= durations[drop];
        drop += 1;
    }
    let kept = audio.slice_frames(audio.frames() - total, total)?.with_provenance(audio.provenance);
    Ok((kept, transcript[drop..].to_vec(), durations[drop..].to_vec()))
}
