//! Joint teacher training of orchestrator, denoiser and pointer on the
//! synthetic world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::flowcore::{corrupt, flow_loss_graph, noise_like, velocity_target};
use crate::latent::LatentBlock;
use crate::model::{self, pointer_on, velocity, ChunkContext, ModelConfig};
use crate::orchestrator::truncate_history;
use crate::pap::pap_loss;
use crate::params::{Adam, Bound, Optimizer, ParameterSet};
use crate::scalar::Real;
use crate::synthworld::{endpoints_from_durations, gen_sample, SynthSample, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub pap_weight: f64,
    /// Probability that a chunk after the first sees the sink chunk.
    pub sink_prob: f64,
    /// Transcript length of each training stream.
    pub sample_tokens: usize,
    pub eval_examples: usize,
    pub log_every: usize,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            pap_weight: 1.0,
            sink_prob: 0.5,
            sample_tokens: 48,
            eval_examples: 64,
            log_every: 100,
            checkpoint_every: 500,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.lr <= 0.0 || !(0.0..=1.0).contains(&self.sink_prob) || self.sample_tokens == 0 {
            return Err(Error::Config("train: batch, lr, sink_prob or sample_tokens out of range".into()));
        }
        Ok(())
    }
}

/// One supervised chunk of a ground-truth stream.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub ctx: ChunkContext<T>,
    pub z_v: LatentBlock<T>,
    pub z_a: LatentBlock<T>,
    /// Endpoint relative to the window start.
    pub s_true: f64,
    pub window_start: usize,
    pub chunk: usize,
}

/// Frames per token inside the first `frames` audio frames (partial tokens included, empty ones dropped).
pub fn token_segments(durations: &[usize], frames: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::new();
    let mut lens = Vec::new();
    let mut start = 0;
    for (i, &d) in durations.iter().enumerate() {
        if start >= frames {
            break;
        }
        let take = d.min(frames - start);
        idx.push(i);
        lens.push(take);
        start += d;
    }
    (idx, lens)
}

/// Conditioning and targets for chunk `k` of a ground-truth stream.
pub fn make_example<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    sample: &SynthSample<T>,
    k: usize,
    with_sink: bool,
) -> Result<Example<T>> {
    let geo = &cfg.geometry;
    let (fa, fv) = (geo.audio_frames(), geo.video_frames);
    if (k + 1) * fa > sample.audio.frames() {
        return Err(Error::Precondition(format!("chunk {k} runs past the end of the sample")));
    }
    let ends = endpoints_from_durations(&sample.durations, fa)?;
    let start_pos = if k == 0 { 0.0 } else { ends[k - 1] };
    let ws = start_pos.floor() as usize;
    let we = (ws + cfg.orchestrator.max_window).min(sample.n_tokens());
    let s_true = ends[k] - ws as f64;
    if s_true > (we - ws) as f64 {
        return Err(Error::Config("transcript window is shorter than one chunk of speech".into()));
    }
    let motion = if k > 0 {
        Some(sample.video.slice_frames(k * fv - geo.motion_frames, geo.motion_frames)?)
    } else {
        None
    };
    let sink = if k > 0 && with_sink { Some(sample.video.slice_frames(0, fv)?) } else { None };
    let cap = geo.history_cap_frames(world);
    let hist_all = sample.audio.slice_frames(0, k * fa)?;
    let (idx, lens) = token_segments(&sample.durations, k * fa);
    let toks: Vec<u32> = idx.iter().map(|&i| sample.tokens[i]).collect();
    let (history, _, _) = truncate_history(&hist_all, &toks, &lens, cap)?;
    Ok(Example {
        ctx: ChunkContext {
            prompt: sample.prompt,
            reference: sample.reference.clone(),
            ref_audio: sample.reference_audio.clone(),
            sink,
            motion,
            window: sample.tokens[ws..we].to_vec(),
            history,
            history_cap_frames: cap,
        },
        z_v: sample.video.slice_frames(k * fv, fv)?,
        z_a: sample.audio.slice_frames(k * fa, fa)?,
        s_true,
        window_start: ws,
        chunk: k,
    })
}

/// A random chunk of a freshly generated stream.
pub fn draw_example<T: Real>(world: &WorldConfig, cfg: &ModelConfig, tcfg: &TrainConfig, rng: &mut impl Rng) -> Result<Example<T>> {
    let sample = gen_sample::<T>(world, tcfg.sample_tokens, rng.gen())?;
    let n_chunks = sample.audio.frames() / cfg.geometry.audio_frames();
    if n_chunks == 0 {
        return Err(Error::Config("sample_tokens too small for one chunk".into()));
    }
    let k = rng.gen_range(0..n_chunks);
    make_example(world, cfg, &sample, k, rng.gen_bool(tcfg.sink_prob))
}

/// An example with its corruption draw.
#[derive(Clone, Debug)]
pub struct NoisyExample<T> {
    pub ex: Example<T>,
    pub t: T,
    pub eps_v: LatentBlock<T>,
    pub eps_a: LatentBlock<T>,
}

pub fn noisy<T: Real>(ex: Example<T>, rng: &mut impl Rng) -> NoisyExample<T> {
    let t = T::lit(rng.gen::<f64>());
    let eps_v = noise_like(&ex.z_v, rng);
    let eps_a = noise_like(&ex.z_a, rng);
    NoisyExample { ex, t, eps_v, eps_a }
}

/// Per-example losses on a graph: `(flow, pointer, ŝ)` handles.
pub fn example_losses<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    n: &NoisyExample<T>,
) -> Result<(crate::autodiff::Var, crate::autodiff::Var, crate::autodiff::Var)> {
    let ex = &n.ex;
    let st = corrupt(&ex.z_v, &ex.z_a, &n.eps_v, &n.eps_a, n.t)?;
    let seq = ex.ctx.pack(cfg, &st.x_v, &st.x_a)?;
    let (xv, xa) = (g.constant(st.x_v.to_tokens()), g.constant(st.x_a.to_tokens()));
    let (fv, fa, _) = velocity(g, p, cfg, &ex.ctx, &seq, xv, xa, n.t, None)?;
    let tv = g.constant(velocity_target(&ex.z_v, &n.eps_v)?.to_tokens());
    let ta = g.constant(velocity_target(&ex.z_a, &n.eps_a)?.to_tokens());
    let flow = flow_loss_graph(g, fv, fa, tv, ta);
    let ptr = pointer_on(g, p, cfg, &ex.ctx, g.constant(ex.z_a.to_tokens()))?;
    let pl = pap_loss(g, ptr.s_hat, T::lit(n.ex.s_true), T::lit(cfg.pap.beta));
    Ok((flow, pl, ptr.s_hat))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub flow_loss: f64,
    pub pap_mae: f64,
}

/// Mean flow loss and pointer MAE over fixed held-out draws.
pub fn evaluate<T: Real>(params: &ParameterSet<T>, cfg: &ModelConfig, set: &[NoisyExample<T>]) -> Result<EvalMetrics> {
    let (mut flow, mut mae) = (0.0, 0.0);
    for n in set {
        let g = Graph::new();
        let p = Bound::new(&g, params, false);
        let (f, _, s) = example_losses(&g, &p, cfg, n)?;
        flow += g.scalar(f).as_f64();
        mae += (g.scalar(s).as_f64() - n.ex.s_true).abs();
    }
    let k = set.len().max(1) as f64;
    Ok(EvalMetrics { flow_loss: flow / k, pap_mae: mae / k })
}

/// Held-out draws from a seed disjoint from training.
pub fn eval_set<T: Real>(world: &WorldConfig, cfg: &ModelConfig, tcfg: &TrainConfig, n: usize, seed: u64) -> Result<Vec<NoisyExample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    (0..n).map(|_| Ok(noisy(draw_example(world, cfg, tcfg, &mut rng)?, &mut rng))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub flow_loss: f64,
    pub pap_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: EvalMetrics,
    pub last: EvalMetrics,
    pub curve: Vec<StepRecord>,
}

/// Trains all components jointly with Adam. `on_step` sees every step record.
pub fn train_teacher<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<ParameterSet<T>>,
    mut on_step: impl FnMut(&StepRecord, &ParameterSet<T>),
) -> Result<(ParameterSet<T>, TrainReport)> {
    cfg.validate(world)?;
    tcfg.validate()?;
    let mut params = match init {
        Some(p) => p,
        None => model::init_params(cfg)?,
    };
    let held_out = eval_set(world, cfg, tcfg, tcfg.eval_examples, tcfg.seed)?;
    let initial = evaluate(&params, cfg, &held_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = Adam::new(tcfg.lr);
    let mut curve = Vec::with_capacity(tcfg.steps);
    let scale = T::lit(1.0 / tcfg.batch as f64);
    for step in 0..tcfg.steps {
        let g = Graph::new();
        let p = Bound::new(&g, &params, true);
        let (mut fsum, mut psum) = (0.0, 0.0);
        let mut total = None;
        for _ in 0..tcfg.batch {
            let n = noisy(draw_example(world, cfg, tcfg, &mut rng)?, &mut rng);
            let (f, pl, _) = example_losses(&g, &p, cfg, &n)?;
            fsum += g.scalar(f).as_f64();
            psum += g.scalar(pl).as_f64();
            let l = g.add(f, g.scale(pl, T::lit(tcfg.pap_weight)));
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let loss = g.scale(total.unwrap(), scale);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("teacher loss at step {step}")));
        }
        let grads = p.grads(&params, &g.backward(loss));
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("teacher gradients at step {step}")));
        }
        opt.step(&mut params, &grads);
        let rec = StepRecord { step, flow_loss: fsum / tcfg.batch as f64, pap_loss: psum / tcfg.batch as f64 };
        on_step(&rec, &params);
        curve.push(rec);
    }
    let last = evaluate(&params, cfg, &held_out)?;
    Ok((params, TrainReport { initial, last, curve }))
}
