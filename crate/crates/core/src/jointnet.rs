//! Joint audio-video denoiser.
//!
//! One sequence holds the clean conditions (prompt, reference portrait, sink
//! chunk, motion frames) followed by the noisy video and audio tokens of the
//! current chunk. Attention projections are shared by both modalities; the
//! feed-forward layer routes video tokens to expert 0 and audio tokens to
//! expert 1. Condition rows only see condition rows, so their keys and values
//! do not depend on `t` or on the noisy tokens and can be cached across a
//! sampling trajectory.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RotaryTable, Var};
use crate::error::{Error, Result};
use crate::latent::{LatentBlock, Modality, Provenance};
use crate::layers::{self, linear, norm, rows};
use crate::params::{Bound, Fnv, Init, ParameterSet};
use crate::rope::{assign_positions, default_sink_offset, rotary_table, PositionAssignment, RopeConfig};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::tokens::{block_tokens, Role, TokenMeta, TokenStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub head_dim: usize,
    pub expert_hidden: usize,
    pub audio_encoder_blocks: usize,
    pub seed: u64,
    pub video_channels: usize,
    pub audio_channels: usize,
    pub cells: usize,
    pub n_prompts: usize,
    /// Width of the audio condition `c_a`.
    pub cond_dim: usize,
    pub rope: RopeConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            n_heads: 2,
            n_blocks: 2,
            head_dim: 16,
            expert_hidden: 64,
            audio_encoder_blocks: 1,
            seed: 11,
            video_channels: 4,
            audio_channels: 4,
            cells: 4,
            n_prompts: 4,
            cond_dim: 32,
            rope: RopeConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("denoiser: {m}")));
        if self.model_dim != self.n_heads * self.head_dim {
            return bad("model_dim must equal n_heads × head_dim");
        }
        if self.head_dim % 2 != 0 {
            return bad("head_dim must be even");
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be ≥ 1");
        }
        if self.video_channels == 0 || self.audio_channels == 0 || self.cells == 0 || self.n_prompts == 0 {
            return bad("io sizes must be positive");
        }
        Ok(())
    }
}

/// Routing rule of the two-expert FFN.
pub fn expert_of(modality: Modality) -> usize {
    match modality {
        Modality::Video => 0,
        Modality::Audio => 1,
    }
}

/// Packed denoiser input for one chunk.
#[derive(Clone, Debug)]
pub struct PackedSequence<T> {
    pub tokens: TokenStream,
    pub positions: Vec<PositionAssignment>,
    /// Row-major `n × n` attention permissions.
    pub mask: Vec<bool>,
    pub prompts: Vec<usize>,
    /// Clean video condition tokens (reference, sink, motion) in sequence order.
    pub video_cond: Tensor<T>,
    pub x_v: Tensor<T>,
    pub x_a: Tensor<T>,
    pub n_cond: usize,
    pub video_frames: usize,
    pub audio_frames: usize,
    pub motion_provenance: Option<Provenance>,
    pub sink_provenance: Option<Provenance>,
    like_v: LatentBlock<T>,
    like_a: LatentBlock<T>,
    rotary: Rc<RotaryTable<T>>,
    audio_rotary: Rc<RotaryTable<T>>,
}

impl<T: Real> PackedSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn count(&self, role: Role) -> usize {
        self.tokens.iter().filter(|t| t.role == role).count()
    }

    /// Wraps token-matrix predictions back into latent blocks.
    pub fn unpack(&self, f_v: &Tensor<T>, f_a: &Tensor<T>) -> Result<(LatentBlock<T>, LatentBlock<T>)> {
        Ok((
            LatentBlock::from_tokens(&self.like_v, self.video_frames, f_v, Provenance::Derived)?,
            LatentBlock::from_tokens(&self.like_a, self.audio_frames, f_a, Provenance::Derived)?,
        ))
    }

    /// Fingerprint of everything the condition rows depend on.
    pub fn condition_fingerprint(&self, params: u64) -> u64 {
        let mut h = Fnv::new();
        h.u64(params);
        h.u64(self.n_cond as u64);
        for &p in &self.prompts {
            h.u64(p as u64);
        }
        for t in &self.tokens[..self.n_cond] {
            h.u64(t.role.id() as u64);
            h.u64(t.frame as u64);
            h.u64(t.cell as u64);
        }
        for p in &self.positions[..self.n_cond] {
            h.u64(p.temporal_index as u64);
        }
        for &x in self.video_cond.data() {
            h.u64(x.as_f64().to_bits());
        }
        h.finish()
    }
}

/// Attention permissions: noisy rows see every token, condition rows see
/// condition tokens only.
pub fn build_mask(tokens: &[TokenMeta]) -> Result<Vec<bool>> {
    for t in tokens {
        if !(t.role.is_condition() || t.role.is_noisy()) {
            return Err(Error::Precondition(format!("role {:?} has no place in the denoiser sequence", t.role)));
        }
    }
    let n = tokens.len();
    let mut mask = vec![false; n * n];
    for (i, ti) in tokens.iter().enumerate() {
        for (j, tj) in tokens.iter().enumerate() {
            mask[i * n + j] = ti.role.is_noisy() || tj.role.is_condition();
        }
    }
    Ok(mask)
}

/// Packs `[prompt, ref, sink, motion, x_v, x_a]`. Empty sink or motion blocks
/// drop out.
#[allow(clippy::too_many_arguments)]
pub fn pack<T: Real>(
    cfg: &DenoiserConfig,
    prompt: Option<usize>,
    reference: &LatentBlock<T>,
    motion: Option<&LatentBlock<T>>,
    sink: Option<&LatentBlock<T>>,
    x_v: &LatentBlock<T>,
    x_a: &LatentBlock<T>,
) -> Result<PackedSequence<T>> {
    let is_video = |b: &LatentBlock<T>| b.modality() == Modality::Video && b.channels() == cfg.video_channels && b.cells() == cfg.cells;
    for (name, b) in [("reference", Some(reference)), ("motion", motion), ("sink", sink), ("x_v", Some(x_v))] {
        if let Some(b) = b {
            if !is_video(b) {
                return Err(Error::Shape(format!("{name}: expected video [{}, T, cells {}], got {:?}", cfg.video_channels, cfg.cells, b.shape())));
            }
        }
    }
    if x_a.modality() != Modality::Audio || x_a.channels() != cfg.audio_channels {
        return Err(Error::Shape(format!("x_a: expected audio [T, {}], got {:?}", cfg.audio_channels, x_a.shape())));
    }
    if let Some(p) = prompt {
        if p >= cfg.n_prompts {
            return Err(Error::Precondition(format!("prompt id {p} ≥ {}", cfg.n_prompts)));
        }
    }
    let motion = motion.filter(|b| !b.is_empty());
    let sink = sink.filter(|b| !b.is_empty());
    let cells = cfg.cells;

    let mut tokens = TokenStream::new();
    let prompts: Vec<usize> = prompt.into_iter().collect();
    tokens.extend(block_tokens(Role::Text, Modality::Video, prompts.len(), 1));
    tokens.extend(block_tokens(Role::Reference, Modality::Video, reference.frames(), cells));
    let mut cond_data = reference.to_tokens().into_data();
    if let Some(s) = sink {
        tokens.extend(block_tokens(Role::Sink, Modality::Video, s.frames(), cells));
        cond_data.extend_from_slice(s.to_tokens().data());
    }
    if let Some(m) = motion {
        tokens.extend(block_tokens(Role::Motion, Modality::Video, m.frames(), cells));
        cond_data.extend_from_slice(m.to_tokens().data());
    }
    let n_cond = tokens.len();
    tokens.extend(block_tokens(Role::NoisyVideo, Modality::Video, x_v.frames(), cells));
    tokens.extend(block_tokens(Role::NoisyAudio, Modality::Audio, x_a.frames(), 1));

    let k = motion.map_or(0, |m| m.frames());
    let sink_len = sink.map_or(0, |s| s.frames());
    let positions = assign_positions(&cfg.rope, &tokens, k, default_sink_offset(k, sink_len))?;
    let mask = build_mask(&tokens)?;
    let rotary = rotary_table(&cfg.rope, &positions, cfg.head_dim);
    let audio_rotary = rotary_table(&cfg.rope, &positions[positions.len() - x_a.frames()..], cfg.head_dim);
    let n_video_cond = cond_data.len() / cfg.video_channels;
    Ok(PackedSequence {
        tokens,
        positions,
        mask,
        prompts,
        video_cond: Tensor::from_vec(&[n_video_cond, cfg.video_channels], cond_data)?,
        x_v: x_v.to_tokens(),
        x_a: x_a.to_tokens(),
        n_cond,
        video_frames: x_v.frames(),
        audio_frames: x_a.frames(),
        motion_provenance: motion.map(|m| m.provenance),
        sink_provenance: sink.map(|s| s.provenance),
        like_v: x_v.clone(),
        like_a: x_a.clone(),
        rotary,
        audio_rotary,
    })
}

/// Per-block keys and values of the condition tokens.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    fingerprint: u64,
    layers: Rc<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> KvCache<T> {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn layers(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.layers
    }

    pub fn is_valid_for(&self, seq: &PackedSequence<T>, params: &Bound) -> bool {
        self.fingerprint == seq.condition_fingerprint(params.fingerprint())
    }
}

fn slice_table<T: Real>(t: &RotaryTable<T>, start: usize, len: usize) -> Rc<RotaryTable<T>> {
    let h = t.half;
    Rc::new(RotaryTable {
        cos: t.cos[start * h..(start + len) * h].to_vec(),
        sin: t.sin[start * h..(start + len) * h].to_vec(),
        half: h,
    })
}

/// Self-attention sublayer of block `block`, returning its residual branch.
///
/// Without a cache every row is computed under the asymmetric mask and the
/// condition keys/values are returned. With a cache, `h` holds only the noisy
/// rows and the cached condition keys/values are prepended.
pub fn attend<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &DenoiserConfig,
    block: usize,
    h: Var,
    seq: &PackedSequence<T>,
    cached: Option<&(Tensor<T>, Tensor<T>)>,
) -> (Var, Option<(Tensor<T>, Tensor<T>)>) {
    let pre = format!("dit.b{block}");
    let x = norm(g, p, &format!("{pre}.norm1"), h);
    let q = g.matmul(x, p.get(&format!("{pre}.wq")));
    let k = g.matmul(x, p.get(&format!("{pre}.wk")));
    let v = g.matmul(x, p.get(&format!("{pre}.wv")));
    let (out, kv) = match cached {
        None => {
            let q = g.rotary(q, Rc::clone(&seq.rotary));
            let k = g.rotary(k, Rc::clone(&seq.rotary));
            let a = layers::multi_head(g, q, k, v, cfg.n_heads, cfg.head_dim, Some(&seq.mask));
            let (kt, vt) = (g.value(k), g.value(v));
            let d = cfg.model_dim;
            let kv = (
                Tensor::from_vec(&[seq.n_cond, d], kt.data()[..seq.n_cond * d].to_vec()).unwrap(),
                Tensor::from_vec(&[seq.n_cond, d], vt.data()[..seq.n_cond * d].to_vec()).unwrap(),
            );
            (a, Some(kv))
        }
        Some((kc, vc)) => {
            let table = slice_table(&seq.rotary, seq.n_cond, seq.len() - seq.n_cond);
            let q = g.rotary(q, Rc::clone(&table));
            let k = g.rotary(k, table);
            let k_all = g.concat_rows(&[g.constant(kc.clone()), k]);
            let v_all = g.concat_rows(&[g.constant(vc.clone()), v]);
            (layers::multi_head(g, q, k_all, v_all, cfg.n_heads, cfg.head_dim, None), None)
        }
    };
    (g.matmul(out, p.get(&format!("{pre}.wo"))), kv)
}

/// Two-expert FFN: row `i` goes through expert `expert_of(modalities[i])`.
pub fn moe_ffn<T: Real>(g: &Graph<T>, p: &Bound, block: usize, x: Var, modalities: &[Modality]) -> Var {
    let n = modalities.len();
    let mut parts = Vec::with_capacity(2);
    for e in 0..2 {
        let idx = rows((0..n).filter(|&i| expert_of(modalities[i]) == e));
        if idx.is_empty() {
            continue;
        }
        let xe = if idx.len() == n { x } else { g.gather_rows(x, Rc::clone(&idx)) };
        let ye = layers::ffn(g, p, &format!("dit.b{block}.e{e}"), xe);
        if idx.len() == n {
            return ye;
        }
        parts.push((ye, idx));
    }
    g.scatter_rows(&parts, n)
}

/// Lightweight audio encoder fusing the orchestrator condition into the noisy
/// audio tokens: `x_a·W_in + c_a·W_c`, then a few transformer blocks whose
/// output projections start at zero.
pub fn audio_fuse<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &DenoiserConfig,
    c_a: Var,
    x_a: Var,
    rot: &Rc<RotaryTable<T>>,
) -> Result<Var> {
    let (fc, dc) = g.shape(c_a);
    let (fx, _) = g.shape(x_a);
    if fc != fx || dc != cfg.cond_dim {
        return Err(Error::Shape(format!("c_a is {fc}×{dc}, expected {fx}×{}", cfg.cond_dim)));
    }
    let mut h = g.add(linear(g, p, "dit.audio_in", x_a), g.matmul(c_a, p.get("dit.fuse.wc")));
    for i in 0..cfg.audio_encoder_blocks {
        h = layers::dense_block(g, p, &format!("dit.fuse.b{i}"), h, Some(rot), None, cfg.n_heads, cfg.head_dim);
    }
    Ok(h)
}

pub struct DenoiserOutput<T> {
    /// Video velocity tokens `[frames·cells, C_v]`.
    pub f_v: Var,
    /// Audio velocity `[frames, C_a]`.
    pub f_a: Var,
    /// Final hidden states of every row that was computed.
    pub hidden: Var,
    pub cache: KvCache<T>,
}

fn gather_table<T: Real>(g: &Graph<T>, table: Var, idx: Vec<usize>) -> Var {
    g.gather_rows(table, Rc::new(idx))
}

/// Full denoiser pass. With `cache`, condition rows are not recomputed.
///
/// `noisy` overrides the packed noisy token matrices with graph variables so
/// that gradients can flow into them (sampler unrolling).
#[allow(clippy::too_many_arguments)]
pub fn forward<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &DenoiserConfig,
    seq: &PackedSequence<T>,
    noisy: Option<(Var, Var)>,
    c_a: Var,
    t: T,
    cache: Option<&KvCache<T>>,
) -> Result<DenoiserOutput<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::Precondition(format!("t = {t} outside [0, 1]")));
    }
    if let Some(c) = cache {
        if !c.is_valid_for(seq, p) {
            return Err(Error::StaleCache("condition tokens or parameters changed since the cache was built".into()));
        }
        if c.layers.len() != cfg.n_blocks {
            return Err(Error::StaleCache("cache depth differs from the model".into()));
        }
    }
    let d = cfg.model_dim;
    let role_emb = p.get("dit.role_emb");
    let cell_emb = p.get("dit.cell_emb");
    let temb_t = layers::timestep_embedding(g, p, "dit.time", t, d);

    let n_noisy_v = seq.x_v.rows();
    let noisy_toks = &seq.tokens[seq.n_cond..];
    let (xv, xa) = match noisy {
        Some((v, a)) => {
            if g.shape(v) != (seq.x_v.rows(), seq.x_v.cols()) || g.shape(a) != (seq.x_a.rows(), seq.x_a.cols()) {
                return Err(Error::Shape("noisy inputs differ from the packed geometry".into()));
            }
            (v, a)
        }
        None => (g.constant(seq.x_v.clone()), g.constant(seq.x_a.clone())),
    };
    let ev = g.add(
        linear(g, p, "dit.video_in", xv),
        gather_table(g, cell_emb, noisy_toks[..n_noisy_v].iter().map(|t| t.cell).collect()),
    );
    let ev = g.add_row(g.add_row(ev, g.slice_rows(role_emb, Role::NoisyVideo.id(), 1)), temb_t);
    let ea = audio_fuse(g, p, cfg, c_a, xa, &seq.audio_rotary)?;
    let ea = g.add_row(g.add_row(ea, g.slice_rows(role_emb, Role::NoisyAudio.id(), 1)), temb_t);

    let cond_rows = if cache.is_some() { 0 } else { seq.n_cond };
    let mut h = if cache.is_some() {
        g.concat_rows(&[ev, ea])
    } else {
        let temb_0 = layers::timestep_embedding(g, p, "dit.time", T::zero(), d);
        let mut parts = Vec::new();
        if !seq.prompts.is_empty() {
            let pe = gather_table(g, p.get("dit.prompt_emb"), seq.prompts.clone());
            parts.push(g.add_row(pe, g.slice_rows(role_emb, Role::Text.id(), 1)));
        }
        let vc_toks = &seq.tokens[seq.prompts.len()..seq.n_cond];
        let vc = g.constant(seq.video_cond.clone());
        let evc = g.add(
            linear(g, p, "dit.video_in", vc),
            gather_table(g, cell_emb, vc_toks.iter().map(|t| t.cell).collect()),
        );
        parts.push(g.add(evc, gather_table(g, role_emb, vc_toks.iter().map(|t| t.role.id()).collect())));
        let cond = g.add_row(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) }, temb_0);
        g.concat_rows(&[cond, ev, ea])
    };

    let modalities: Vec<Modality> = seq.tokens[seq.n_cond - cond_rows..].iter().map(|t| t.modality).collect();
    let mut kv_layers = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let (a, kv) = attend(g, p, cfg, b, h, seq, cache.map(|c| &c.layers[b]));
        if let Some(kv) = kv {
            kv_layers.push(kv);
        }
        h = g.add(h, a);
        let x = norm(g, p, &format!("dit.b{b}.norm2"), h);
        h = g.add(h, moe_ffn(g, p, b, x, &modalities));
    }

    let hv = g.slice_rows(h, cond_rows, n_noisy_v);
    let ha = g.slice_rows(h, cond_rows + n_noisy_v, seq.audio_frames);
    let f_v = linear(g, p, "dit.head_v", norm(g, p, "dit.head_v.norm", hv));
    let ha = layers::dense_block(g, p, "dit.adec", ha, Some(&seq.audio_rotary), None, cfg.n_heads, cfg.head_dim);
    let f_a = linear(g, p, "dit.head_a", norm(g, p, "dit.head_a.norm", ha));

    let cache = match cache {
        Some(c) => c.clone(),
        None => KvCache { fingerprint: seq.condition_fingerprint(p.fingerprint()), layers: Rc::new(kv_layers) },
    };
    Ok(DenoiserOutput { f_v, f_a, hidden: h, cache })
}

/// Deterministic initial parameters under the `dit.` namespace.
pub fn init_params<T: Real>(cfg: &DenoiserConfig) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut ps = ParameterSet::new();
    let mut init = Init::new(cfg.seed);
    let d = cfg.model_dim;
    layers::init_linear(&mut ps, &mut init, "dit.video_in", cfg.video_channels, d);
    layers::init_linear(&mut ps, &mut init, "dit.audio_in", cfg.audio_channels, d);
    ps.insert("dit.fuse.wc", init.linear(cfg.cond_dim, d));
    ps.insert("dit.cell_emb", init.normal(&[cfg.cells, d], 0.3));
    ps.insert("dit.role_emb", init.normal(&[Role::ALL.len(), d], 0.3));
    ps.insert("dit.prompt_emb", init.normal(&[cfg.n_prompts, d], 0.3));
    layers::init_linear(&mut ps, &mut init, "dit.time.fc1", d, d);
    layers::init_linear(&mut ps, &mut init, "dit.time.fc2", d, d);
    for i in 0..cfg.audio_encoder_blocks {
        layers::init_dense_block(&mut ps, &mut init, &format!("dit.fuse.b{i}"), d, cfg.expert_hidden, true);
    }
    for b in 0..cfg.n_blocks {
        let pre = format!("dit.b{b}");
        layers::init_attention(&mut ps, &mut init, &pre, d, false);
        layers::init_gain(&mut ps, &format!("{pre}.norm2"), d);
        for e in 0..2 {
            layers::init_ffn(&mut ps, &mut init, &format!("{pre}.e{e}"), d, cfg.expert_hidden, false);
        }
    }
    layers::init_gain(&mut ps, "dit.head_v.norm", d);
    layers::init_linear(&mut ps, &mut init, "dit.head_v", d, cfg.video_channels);
    layers::init_dense_block(&mut ps, &mut init, "dit.adec", d, cfg.expert_hidden, false);
    layers::init_gain(&mut ps, "dit.head_a.norm", d);
    layers::init_linear(&mut ps, &mut init, "dit.head_a", d, cfg.audio_channels);
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcore::noise_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            model_dim: 8,
            n_heads: 2,
            head_dim: 4,
            expert_hidden: 8,
            cond_dim: 6,
            ..DenoiserConfig::default()
        }
    }

    fn blocks(rng: &mut ChaCha8Rng, frames: usize) -> Vec<LatentBlock<f64>> {
        let v = |f| noise_like(&LatentBlock::zeros_video(4, f, 2, 2), rng);
        let mut out: Vec<_> = [1, frames, frames, frames].into_iter().map(v).collect();
        out.push(noise_like(&LatentBlock::zeros_audio(4 * frames, 4), rng));
        out
    }

    #[test]
    fn packing_counts_and_first_chunk() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = blocks(&mut rng, 9);
        let first = pack(&cfg, None, &b[0], None, None, &b[3], &b[4]).unwrap();
        let roles: Vec<Role> = first.tokens.iter().map(|t| t.role).collect();
        assert_eq!(first.len(), 4 + 36 + 36);
        assert!(roles[..4].iter().all(|&r| r == Role::Reference));
        assert!(roles[4..40].iter().all(|&r| r == Role::NoisyVideo));
        let full = pack(&cfg, Some(2), &b[0], Some(&b[1]), Some(&b[2]), &b[3], &b[4]).unwrap();
        assert_eq!(full.count(Role::Motion), 9 * 4);
        assert_eq!(full.count(Role::Sink), 9 * 4);
        assert_eq!(full.count(Role::NoisyVideo), 9 * 4);
        assert_eq!(full.count(Role::NoisyAudio), 36);
        assert_eq!(full.len(), 1 + 4 + 36 * 4);
        let sink_first = full.tokens.iter().position(|t| t.role == Role::Sink).unwrap();
        let motion_first = full.tokens.iter().position(|t| t.role == Role::Motion).unwrap();
        assert!(sink_first < motion_first);
        let again = pack(&cfg, Some(2), &b[0], Some(&b[1]), Some(&b[2]), &b[3], &b[4]).unwrap();
        assert_eq!(again.tokens, full.tokens);
        assert_eq!(again.mask, full.mask);
    }

    #[test]
    fn mask_rule() {
        let toks = vec![
            TokenMeta::new(Role::Reference, Modality::Video, 0, 0),
            TokenMeta::new(Role::Motion, Modality::Video, 0, 0),
            TokenMeta::new(Role::NoisyVideo, Modality::Video, 0, 0),
            TokenMeta::new(Role::NoisyAudio, Modality::Audio, 0, 0),
        ];
        let m = build_mask(&toks).unwrap();
        let expect = [
            [true, true, false, false],
            [true, true, false, false],
            [true, true, true, true],
            [true, true, true, true],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[i * 4 + j], expect[i][j]);
            }
        }
        let noisy = block_tokens(Role::NoisyAudio, Modality::Audio, 3, 1);
        assert!(build_mask(&noisy).unwrap().iter().all(|&x| x));
        let cond = block_tokens(Role::Sink, Modality::Video, 2, 2);
        assert!(build_mask(&cond).unwrap().iter().all(|&x| x));
        assert!(build_mask(&block_tokens(Role::History, Modality::Audio, 1, 1)).is_err());
    }

    fn run(
        cfg: &DenoiserConfig,
        ps: &ParameterSet<f64>,
        seq: &PackedSequence<f64>,
        c_a: &Tensor<f64>,
        t: f64,
        cache: Option<&KvCache<f64>>,
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, KvCache<f64>) {
        let g = Graph::new();
        let p = Bound::new(&g, ps, false);
        let c = g.constant(c_a.clone());
        let out = forward(&g, &p, cfg, seq, None, c, t, cache).unwrap();
        (g.tensor(out.f_v), g.tensor(out.f_a), g.tensor(out.hidden), out.cache)
    }

    #[test]
    fn cached_forward_matches_uncached_and_detects_staleness() {
        let cfg = tiny();
        let ps = init_params::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = blocks(&mut rng, 3);
        let seq = pack(&cfg, Some(1), &b[0], Some(&b[1]), Some(&b[2]), &b[3], &b[4]).unwrap();
        let c_a = noise_like(&LatentBlock::zeros_audio(12, 6), &mut rng).tensor().clone();
        let (_, _, _, cache) = run(&cfg, &ps, &seq, &c_a, 1.0, None);
        for t in [0.75, 0.5, 0.25] {
            let (v0, a0, _, c0) = run(&cfg, &ps, &seq, &c_a, t, None);
            let (v1, a1, _, _) = run(&cfg, &ps, &seq, &c_a, t, Some(&cache));
            assert!(v0.max_abs_diff(&v1) < 1e-10 && a0.max_abs_diff(&a1) < 1e-10);
            for (x, y) in c0.layers().iter().zip(cache.layers()) {
                assert_eq!(x.0, y.0);
                assert_eq!(x.1, y.1);
            }
        }
        let other = pack(&cfg, Some(0), &b[0], Some(&b[1]), Some(&b[2]), &b[3], &b[4]).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &ps, false);
        let c = g.constant(c_a.clone());
        assert!(matches!(forward(&g, &p, &cfg, &other, None, c, 0.5, Some(&cache)), Err(Error::StaleCache(_))));
        let mut ps2 = ps.clone();
        ps2.get_mut("dit.b0.wk").unwrap().data_mut()[0] += 1e-3;
        let p2 = Bound::new(&g, &ps2, false);
        assert!(matches!(forward(&g, &p2, &cfg, &seq, None, c, 0.5, Some(&cache)), Err(Error::StaleCache(_))));
    }

    #[test]
    fn condition_rows_ignore_noisy_tokens() {
        let cfg = tiny();
        let ps = init_params::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = blocks(&mut rng, 2);
        let c_a = noise_like(&LatentBlock::zeros_audio(8, 6), &mut rng).tensor().clone();
        let s0 = pack(&cfg, Some(0), &b[0], Some(&b[1]), None, &b[3], &b[4]).unwrap();
        let x_v2 = noise_like(&b[3], &mut rng);
        let s1 = pack(&cfg, Some(0), &b[0], Some(&b[1]), None, &x_v2, &b[4]).unwrap();
        let (v0, _, h0, _) = run(&cfg, &ps, &s0, &c_a, 0.3, None);
        let (v1, _, h1, _) = run(&cfg, &ps, &s1, &c_a, 0.9, None);
        let n = s0.n_cond * cfg.model_dim;
        assert_eq!(&h0.data()[..n], &h1.data()[..n]);
        assert!(v0.max_abs_diff(&v1) > 1e-6);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let cfg = tiny();
        let ps = init_params::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = noise_like(&LatentBlock::zeros_video(4, 1, 2, 2), &mut rng);
        let mut c1 = cfg.clone();
        c1.cells = 4;
        let seq = pack(&c1, None, &r, None, None, &LatentBlock::zeros_video(4, 0, 2, 2), &LatentBlock::zeros_audio(0, 4)).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &ps, false);
        let h = g.constant(noise_like(&LatentBlock::zeros_audio(1, 8), &mut rng).tensor().clone());
        let one = PackedSequence { mask: vec![true], ..seq.clone() };
        let one = PackedSequence { tokens: one.tokens[..1].to_vec(), positions: one.positions[..1].to_vec(), n_cond: 1, ..one };
        let one = PackedSequence { rotary: slice_table(&one.rotary, 0, 1), ..one };
        let (a, _) = attend(&g, &p, &cfg, 0, h, &one, None);
        let x = norm(&g, &p, "dit.b0.norm1", h);
        let expect = g.matmul(g.matmul(x, p.get("dit.b0.wv")), p.get("dit.b0.wo"));
        assert!(g.value(a).max_abs_diff(&g.value(expect)) < 1e-12);
    }

    #[test]
    fn routing_matches_direct_expert_calls() {
        let cfg = tiny();
        let ps = init_params::<f64>(&cfg).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &ps, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = g.constant(noise_like(&LatentBlock::zeros_audio(5, 8), &mut rng).tensor().clone());
        let mods = [Modality::Video, Modality::Audio, Modality::Audio, Modality::Video, Modality::Audio];
        let y = g.tensor(moe_ffn(&g, &p, 0, x, &mods));
        for (i, m) in mods.iter().enumerate() {
            let xi = g.slice_rows(x, i, 1);
            let direct = g.tensor(layers::ffn(&g, &p, &format!("dit.b0.e{}", expert_of(*m)), xi));
            assert_eq!(y.row(i), direct.data());
        }
    }

    #[test]
    fn audio_fuse_identity_at_init_and_frame_check() {
        let cfg = tiny();
        let ps = init_params::<f64>(&cfg).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &ps, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xa = g.constant(noise_like(&LatentBlock::zeros_audio(36, 4), &mut rng).tensor().clone());
        let rot = rotary_table::<f64>(&cfg.rope, &vec![PositionAssignment { temporal_index: 0, modality: Modality::Audio, base_frequency_scale: 0.25 }; 36], cfg.head_dim);
        let zero = g.constant(Tensor::zeros(&[36, 6]));
        let fused = audio_fuse(&g, &p, &cfg, zero, xa, &rot).unwrap();
        let embed = linear(&g, &p, "dit.audio_in", xa);
        assert!(g.value(fused).max_abs_diff(&g.value(embed)) < 1e-12);
        let short = g.constant(Tensor::zeros(&[35, 6]));
        assert!(audio_fuse(&g, &p, &cfg, short, xa, &rot).is_err());
    }

    #[test]
    fn output_shapes_and_prompt_matters() {
        let cfg = tiny();
        let ps = init_params::<f64>(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = blocks(&mut rng, 3);
        let c_a = noise_like(&LatentBlock::zeros_audio(12, 6), &mut rng).tensor().clone();
        let s0 = pack(&cfg, Some(0), &b[0], None, None, &b[3], &b[4]).unwrap();
        let s1 = pack(&cfg, Some(3), &b[0], None, None, &b[3], &b[4]).unwrap();
        let (v0, a0, _, _) = run(&cfg, &ps, &s0, &c_a, 0.5, None);
        let (v1, _, _, _) = run(&cfg, &ps, &s1, &c_a, 0.5, None);
        let (fv, fa) = s0.unpack(&v0, &a0).unwrap();
        assert_eq!(fv.shape(), b[3].shape());
        assert_eq!(fa.shape(), b[4].shape());
        assert!(v0.max_abs_diff(&v1) > 1e-6);
    }
}
