//! Two-stage distillation of the teacher into a few-step student.
//!
//! Stage I runs distribution matching on single chunks: the student's
//! few-step samples are re-noised, the frozen teacher ("real score") and an
//! online copy ("fake score") each predict the clean sample, and their
//! difference is pushed back through the generator. Stage II repeats the same
//! update on the last chunks of an autoregressive student rollout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flowcore::{noise_like, uniform_schedule, TEACHER_STEPS};
use crate::latent::{LatentBlock, Provenance};
use crate::model::{is_denoiser_param, sample_chunk, velocity, ChunkContext, ModelConfig};
use crate::params::{Bound, Optimizer, ParameterSet, Sgd};
use crate::scalar::Real;
use crate::stream::{ChunkOutput, StreamConfig, StreamRequest, Streamer};
use crate::synthworld::{gen_sample, WorldConfig};
use crate::tensor::Tensor;
use crate::train::{draw_example, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub student_lr: f64,
    pub fake_score_lr: f64,
    /// Multiplier on both learning rates in Stage I.
    pub stage1_lr_scale: f64,
    /// Multiplier on both learning rates in Stage II.
    pub stage2_lr_scale: f64,
    /// Sampling steps of the student generator.
    pub student_steps: usize,
    /// Chunks generated per Stage II rollout.
    pub rollout_chunks: usize,
    /// Final rollout chunks that enter the loss.
    pub loss_window: usize,
    pub batch: usize,
    /// Fake-score updates per student update.
    pub fake_updates: usize,
    /// Stage I pool of teacher (noise, sample) pairs; 0 disables the regression term.
    pub regression_pairs: usize,
    pub regression_weight: f64,
    /// Sampling steps of the teacher when building regression targets.
    pub teacher_steps: usize,
    /// Re-noising times are drawn uniformly from this range.
    pub t_range: (f64, f64),
    pub sink: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 600,
            stage2_steps: 400,
            student_lr: 2e-6,
            fake_score_lr: 4e-7,
            stage1_lr_scale: 30.0,
            stage2_lr_scale: 1.0,
            student_steps: 4,
            rollout_chunks: 5,
            loss_window: 3,
            batch: 4,
            fake_updates: 1,
            regression_pairs: 256,
            regression_weight: 1.0,
            teacher_steps: TEACHER_STEPS,
            t_range: (0.02, 0.98),
            sink: true,
            seed: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("distill: {m}")));
        if self.student_steps == 0 {
            return bad("student_steps must be ≥ 1");
        }
        if self.loss_window == 0 || self.loss_window > self.rollout_chunks {
            return bad("need 1 ≤ loss_window ≤ rollout_chunks");
        }
        if self.rollout_chunks < 2 {
            return bad("rollout_chunks must be ≥ 2");
        }
        if self.batch == 0 || self.student_lr < 0.0 || self.fake_score_lr < 0.0 || self.stage1_lr_scale < 0.0 || self.stage2_lr_scale < 0.0 {
            return bad("batch must be positive and learning rates non-negative");
        }
        if self.regression_pairs > 0 && (self.teacher_steps == 0 || self.regression_weight < 0.0) {
            return bad("regression needs teacher_steps ≥ 1 and a non-negative weight");
        }
        let (lo, hi) = self.t_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("t_range must satisfy 0 < lo ≤ hi ≤ 1");
        }
        Ok(())
    }
}

/// Frozen teacher and its trainable copy.
#[derive(Clone, Debug)]
pub struct ScorePair<T> {
    real: ParameterSet<T>,
    pub fake: ParameterSet<T>,
}

impl<T: Real> ScorePair<T> {
    pub fn new(teacher: ParameterSet<T>) -> Self {
        Self { fake: teacher.clone(), real: teacher }
    }

    pub fn real(&self) -> &ParameterSet<T> {
        &self.real
    }
}

/// One generator input: conditioning and the noise the student starts from.
#[derive(Clone, Debug)]
pub struct DmdItem<T> {
    pub ctx: ChunkContext<T>,
    pub noise_v: LatentBlock<T>,
    pub noise_a: LatentBlock<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub stage: u8,
    pub step: usize,
    /// `½‖x − sg(x − g)‖²` summed over the batch.
    pub generator_loss: f64,
    pub fake_loss: f64,
    /// Norm of the distribution-matching direction `g`.
    pub dmd_norm: f64,
    /// `½‖x − y‖²` against teacher samples, summed over the batch.
    pub regression_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cursor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<f64>,
    pub cursor_clamps: usize,
}

/// Few-step Euler sampling on the graph so gradients reach the student.
pub fn generate<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    ctx: &ChunkContext<T>,
    noise_v: &LatentBlock<T>,
    noise_a: &LatentBlock<T>,
    steps: usize,
) -> Result<(Var, Var)> {
    let seq = ctx.pack(cfg, noise_v, noise_a)?;
    let mut xv = g.constant(noise_v.to_tokens());
    let mut xa = g.constant(noise_a.to_tokens());
    let schedule = uniform_schedule(steps);
    for (i, &t) in schedule.iter().enumerate() {
        let dt = T::lit(t - schedule.get(i + 1).copied().unwrap_or(0.0));
        let (fv, fa, _) = velocity(g, p, cfg, ctx, &seq, xv, xa, T::lit(t), None)?;
        xv = g.sub(xv, g.scale(fv, dt));
        xa = g.sub(xa, g.scale(fa, dt));
    }
    Ok((xv, xa))
}

/// Clean-sample prediction `x_t − t·v` of a score network, as token matrices.
pub fn predict_clean<T: Real>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    ctx: &ChunkContext<T>,
    x_v: &LatentBlock<T>,
    x_a: &LatentBlock<T>,
    t: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = Graph::new();
    let p = Bound::new(&g, params, false);
    let seq = ctx.pack(cfg, x_v, x_a)?;
    let (tv, ta) = (x_v.to_tokens(), x_a.to_tokens());
    let (fv, fa, _) = velocity(&g, &p, cfg, ctx, &seq, g.constant(tv.clone()), g.constant(ta.clone()), t, None)?;
    let x0 = |x: &Tensor<T>, f: Var| x.zip_map(&g.tensor(f), |x, f| x - t * f);
    Ok((x0(&tv, fv)?, x0(&ta, fa)?))
}

/// Student sample in latent form plus the re-noising draw used on it.
struct Renoised<T> {
    ctx: ChunkContext<T>,
    x_v: LatentBlock<T>,
    x_a: LatentBlock<T>,
}

impl<T: Real> Renoised<T> {
    fn corrupt(&self, t: T, rng: &mut impl Rng) -> (LatentBlock<T>, LatentBlock<T>, LatentBlock<T>, LatentBlock<T>) {
        let ev = noise_like(&self.x_v, rng);
        let ea = noise_like(&self.x_a, rng);
        let mix = |x: &LatentBlock<T>, e: &LatentBlock<T>| {
            let mut out = x.clone().with_provenance(Provenance::Derived);
            *out.tensor_mut() = x.tensor().zip_map(e.tensor(), |x, e| (T::one() - t) * x + t * e).unwrap();
            out
        };
        (mix(&self.x_v, &ev), mix(&self.x_a, &ea), ev, ea)
    }
}

/// Distribution-matching direction `x̂₀_fake − x̂₀_real` for one sample,
/// normalised by the mean distance between the sample and the real prediction.
fn dmd_direction<T: Real>(
    scores: &ScorePair<T>,
    cfg: &ModelConfig,
    s: &Renoised<T>,
    t: T,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (xt_v, xt_a, _, _) = s.corrupt(t, rng);
    let (rv, ra) = predict_clean(&scores.real, cfg, &s.ctx, &xt_v, &xt_a, t)?;
    let (fv, fa) = predict_clean(&scores.fake, cfg, &s.ctx, &xt_v, &xt_a, t)?;
    let (xv, xa) = (s.x_v.to_tokens(), s.x_a.to_tokens());
    let dist: f64 = xv.data().iter().zip(rv.data()).chain(xa.data().iter().zip(ra.data())).map(|(x, r)| (*x - *r).abs().as_f64()).sum::<f64>()
        / (xv.len() + xa.len()) as f64;
    let w = T::lit(1.0 / dist.max(1e-8));
    Ok((fv.zip_map(&rv, |f, r| (f - r) * w)?, fa.zip_map(&ra, |f, r| (f - r) * w)?))
}

/// Denoising loss of the fake score on detached student samples, summed over elements.
fn fake_loss_graph<T: Real>(g: &Graph<T>, p: &Bound, cfg: &ModelConfig, s: &Renoised<T>, t: T, rng: &mut impl Rng) -> Result<Var> {
    let (xt_v, xt_a, ev, ea) = s.corrupt(t, rng);
    let seq = s.ctx.pack(cfg, &xt_v, &xt_a)?;
    let (fv, fa, _) = velocity(g, p, cfg, &s.ctx, &seq, g.constant(xt_v.to_tokens()), g.constant(xt_a.to_tokens()), t, None)?;
    let target = |e: &LatentBlock<T>, x: &LatentBlock<T>| e.to_tokens().zip_map(&x.to_tokens(), |e, x| e - x).unwrap();
    let dv = g.sub(fv, g.constant(target(&ev, &s.x_v)));
    let da = g.sub(fa, g.constant(target(&ea, &s.x_a)));
    Ok(g.add(g.sum(g.mul(dv, dv)), g.sum(g.mul(da, da))))
}

fn draw_t<T: Real>(cfg: &DistillConfig, rng: &mut impl Rng) -> T {
    let (lo, hi) = cfg.t_range;
    T::lit(if hi > lo { rng.gen_range(lo..hi) } else { lo })
}

fn finite_or_abort<T: Real>(grads: &ParameterSet<T>, rec: &DistillRecord, what: &str) -> Result<()> {
    if grads.all_finite() && rec.generator_loss.is_finite() && rec.fake_loss.is_finite() && rec.regression_loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at stage {} step {}: {}", rec.stage, rec.step, serde_json::to_string(rec).unwrap_or_default())))
    }
}

/// A student sample built on the graph, with the context its scores see.
pub struct GeneratedSample<T> {
    pub ctx: ChunkContext<T>,
    pub x_v: Var,
    pub x_a: Var,
    like_v: LatentBlock<T>,
    like_a: LatentBlock<T>,
    /// Teacher sample from the same noise, as token matrices.
    target: Option<(Tensor<T>, Tensor<T>)>,
}

/// One distribution-matching update of the student followed by
/// `fake_updates` denoising updates of the fake score.
///
/// `build` constructs the student's samples on the graph it is given.
pub fn dmd_step<T: Real>(
    student: &mut ParameterSet<T>,
    scores: &mut ScorePair<T>,
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    lr_scale: f64,
    rng: &mut impl Rng,
    rec: &mut DistillRecord,
    build: impl Fn(&Graph<T>, &Bound) -> Result<Vec<GeneratedSample<T>>>,
) -> Result<()> {
    for (n, t) in student.iter() {
        let f = scores.fake.get(n)?;
        if f.shape() != t.shape() || scores.real.get(n)?.shape() != t.shape() {
            return Err(Error::Shape(format!("student, fake and real disagree on `{n}`")));
        }
    }
    let g = Graph::new();
    let p = Bound::with_trainable(&g, student, is_denoiser_param);
    let samples = build(&g, &p)?;
    let mut loss = None;
    let mut detached = Vec::with_capacity(samples.len());
    let (mut gen_loss, mut norm2, mut reg_loss) = (0.0, 0.0, 0.0);
    let w = T::lit(dcfg.regression_weight);
    for s in samples {
        let x_v = LatentBlock::from_tokens(&s.like_v, s.like_v.frames(), &g.tensor(s.x_v), Provenance::Generated)?;
        let x_a = LatentBlock::from_tokens(&s.like_a, s.like_a.frames(), &g.tensor(s.x_a), Provenance::Generated)?;
        let r = Renoised { ctx: s.ctx, x_v, x_a };
        let (dv, da) = dmd_direction(scores, cfg, &r, draw_t(dcfg, rng), rng)?;
        let n2 = (dv.sq_norm() + da.sq_norm()).as_f64();
        norm2 += n2;
        gen_loss += 0.5 * n2;
        // ½‖x − sg(x − g)‖² has gradient g with respect to x.
        let (dv, da) = match &s.target {
            Some((yv, ya)) => {
                let (xv, xa) = (g.tensor(s.x_v), g.tensor(s.x_a));
                let rv = xv.zip_map(yv, |x, y| x - y)?;
                let ra = xa.zip_map(ya, |x, y| x - y)?;
                reg_loss += 0.5 * (rv.sq_norm() + ra.sq_norm()).as_f64();
                (dv.zip_map(&rv, |d, r| d + w * r)?, da.zip_map(&ra, |d, r| d + w * r)?)
            }
            None => (dv, da),
        };
        // Adds λ·½‖x − y‖², whose gradient is λ(x − y), when a target exists.
        let l = g.add(g.sum(g.mul(s.x_v, g.constant(dv))), g.sum(g.mul(s.x_a, g.constant(da))));
        loss = Some(match loss {
            None => l,
            Some(acc) => g.add(acc, l),
        });
        detached.push(r);
    }
    rec.generator_loss = gen_loss;
    rec.dmd_norm = norm2.sqrt();
    rec.regression_loss = reg_loss;
    let loss = loss.ok_or_else(|| Error::Precondition("empty distillation batch".into()))?;
    let grads = p.grads(student, &g.backward(loss));
    finite_or_abort(&grads, rec, "student gradients")?;

    let mut fake_total = 0.0;
    let mut fake_grads = Vec::with_capacity(dcfg.fake_updates);
    for _ in 0..dcfg.fake_updates {
        let fg = Graph::new();
        let fp = Bound::with_trainable(&fg, &scores.fake, is_denoiser_param);
        let mut acc = None;
        for r in &detached {
            let l = fake_loss_graph(&fg, &fp, cfg, r, draw_t(dcfg, rng), rng)?;
            acc = Some(match acc {
                None => l,
                Some(a) => fg.add(a, l),
            });
        }
        let acc = acc.unwrap();
        fake_total += fg.scalar(acc).as_f64();
        fake_grads.push((fp, fg, acc));
    }
    rec.fake_loss = fake_total / dcfg.fake_updates.max(1) as f64;

    Sgd { lr: dcfg.student_lr * lr_scale }.step(student, &grads);
    for (fp, fg, acc) in fake_grads {
        let grads = fp.grads(&scores.fake, &fg.backward(acc));
        finite_or_abort(&grads, rec, "fake-score gradients")?;
        Sgd { lr: dcfg.fake_score_lr * lr_scale }.step(&mut scores.fake, &grads);
    }
    Ok(())
}

impl<T: Real> GeneratedSample<T> {
    pub fn new(g: &Graph<T>, ctx: ChunkContext<T>, x_v: Var, x_a: Var, frames_v: usize, frames_a: usize) -> Result<Self> {
        let s = ctx.reference.shape().to_vec();
        let like_v = LatentBlock::zeros_video(s[0], frames_v, s[2], s[3]);
        let like_a = LatentBlock::zeros_audio(frames_a, g.shape(x_a).1);
        Ok(Self { ctx, x_v, x_a, like_v, like_a, target: None })
    }

    pub fn with_target(mut self, y_v: &LatentBlock<T>, y_a: &LatentBlock<T>) -> Self {
        self.target = Some((y_v.to_tokens(), y_a.to_tokens()));
        self
    }
}

/// A Stage I conditioning and noise with the teacher's sample from that noise.
#[derive(Clone, Debug)]
pub struct RegressionPair<T> {
    pub item: DmdItem<T>,
    pub y_v: LatentBlock<T>,
    pub y_a: LatentBlock<T>,
}

fn draw_item<T: Real>(world: &WorldConfig, cfg: &ModelConfig, tcfg: &TrainConfig, rng: &mut impl Rng) -> Result<DmdItem<T>> {
    let ex = draw_example::<T>(world, cfg, tcfg, rng)?;
    let noise_v = noise_like(&ex.z_v, rng).with_provenance(Provenance::Noise);
    let noise_a = noise_like(&ex.z_a, rng).with_provenance(Provenance::Noise);
    Ok(DmdItem { ctx: ex.ctx, noise_v, noise_a })
}

/// Samples the frozen teacher on `n` fresh conditionings and noises.
pub fn regression_pairs<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    teacher: &ParameterSet<T>,
    rng: &mut impl Rng,
) -> Result<Vec<RegressionPair<T>>> {
    let tcfg = stage1_examples(dcfg);
    let schedule = uniform_schedule(dcfg.teacher_steps);
    (0..dcfg.regression_pairs)
        .map(|_| {
            let item = draw_item(world, cfg, &tcfg, rng)?;
            let (y_v, y_a) = sample_chunk(teacher, cfg, &item.ctx, &item.noise_v, &item.noise_a, &schedule)?;
            Ok(RegressionPair { item, y_v, y_a })
        })
        .collect()
}

fn stage1_examples(dcfg: &DistillConfig) -> TrainConfig {
    TrainConfig { sink_prob: if dcfg.sink { 0.5 } else { 0.0 }, ..TrainConfig::default() }
}

/// Stage I: distribution matching on single ground-truth-conditioned chunks,
/// plus regression onto teacher samples when a pair pool is configured.
pub fn stage1<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    student: &mut ParameterSet<T>,
    scores: &mut ScorePair<T>,
    mut on_record: impl FnMut(&DistillRecord, &ParameterSet<T>) -> Result<()>,
) -> Result<()> {
    dcfg.validate()?;
    let tcfg = stage1_examples(dcfg);
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let pairs = regression_pairs(world, cfg, dcfg, scores.real(), &mut rng)?;
    for step in 0..dcfg.stage1_steps {
        let batch: Vec<(DmdItem<T>, Option<&RegressionPair<T>>)> = (0..dcfg.batch)
            .map(|_| {
                if pairs.is_empty() {
                    Ok((draw_item(world, cfg, &tcfg, &mut rng)?, None))
                } else {
                    let p = &pairs[rng.gen_range(0..pairs.len())];
                    Ok((p.item.clone(), Some(p)))
                }
            })
            .collect::<Result<_>>()?;
        let mut rec = DistillRecord { stage: 1, step, ..Default::default() };
        dmd_step(student, scores, cfg, dcfg, dcfg.stage1_lr_scale, &mut rng, &mut rec, |g, p| {
            batch
                .iter()
                .map(|(it, pair)| {
                    let (xv, xa) = generate(g, p, cfg, &it.ctx, &it.noise_v, &it.noise_a, dcfg.student_steps)?;
                    let s = GeneratedSample::new(g, it.ctx.clone(), xv, xa, it.noise_v.frames(), it.noise_a.frames())?;
                    Ok(match pair {
                        Some(p) => s.with_target(&p.y_v, &p.y_a),
                        None => s,
                    })
                })
                .collect()
        })?;
        on_record(&rec, student)?;
    }
    Ok(())
}

/// Student rollout over a world stream's transcript.
pub struct Rollout<T> {
    pub chunks: Vec<ChunkOutput<T>>,
    pub clamps: usize,
    pub transcript: Vec<u32>,
}

/// Generates `k` consecutive chunks with the student's own outputs as motion.
pub fn rollout<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    student: &ParameterSet<T>,
    request: StreamRequest<T>,
    k: usize,
    steps: usize,
    sink: bool,
    seed: u64,
) -> Result<Rollout<T>> {
    if k < 2 {
        return Err(Error::Precondition("rollouts need at least two chunks".into()));
    }
    let transcript = request.transcript.clone();
    let scfg = StreamConfig { sampling_steps: steps, sink, use_cache: true, overlap: false, seed };
    let mut s = Streamer::new(world, student, cfg, scfg, request)?;
    let chunks = s.run(k, |_| Ok(()))?;
    let clamps = chunks.iter().filter(|c| c.clamped).count();
    Ok(Rollout { chunks, clamps, transcript })
}

/// Scoring context of the loss window: conditioning of its first chunk with
/// the transcript cut at the pointer endpoint of its last chunk.
pub fn window_context<T: Real>(r: &Rollout<T>, window: usize) -> Result<ChunkContext<T>> {
    let n = r.chunks.len();
    if window == 0 || window > n {
        return Err(Error::Precondition(format!("loss window {window} over {n} chunks")));
    }
    let first = &r.chunks[n - window];
    let last = &r.chunks[n - 1];
    let mut ctx = first.ctx.clone();
    let s_hat = last.cursor - first.window_start as f64;
    ctx.window = crate::pap::truncate_transcript(&ctx.window, s_hat).to_vec();
    if ctx.window.is_empty() {
        ctx.window = first.ctx.window.iter().take(1).copied().collect();
    }
    Ok(ctx)
}

/// Stage II: distribution matching on the last `loss_window` chunks of a
/// student rollout, concatenated along time.
pub fn stage2<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    dcfg: &DistillConfig,
    student: &mut ParameterSet<T>,
    scores: &mut ScorePair<T>,
    mut on_record: impl FnMut(&DistillRecord, &ParameterSet<T>) -> Result<()>,
) -> Result<()> {
    dcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed ^ 0x5747_2);
    let tokens = 16 * dcfg.rollout_chunks;
    for step in 0..dcfg.stage2_steps {
        let mut rollouts = Vec::with_capacity(dcfg.batch);
        for _ in 0..dcfg.batch {
            let sample = gen_sample::<T>(world, tokens, rng.gen())?;
            let r = rollout(world, cfg, student, StreamRequest::from_sample(&sample), dcfg.rollout_chunks, dcfg.student_steps, dcfg.sink, rng.gen())?;
            if r.chunks.len() < dcfg.loss_window {
                return Err(Error::Precondition("rollout ended before the loss window".into()));
            }
            rollouts.push(r);
        }
        let mut rec = DistillRecord {
            stage: 2,
            step,
            cursor: rollouts.first().and_then(|r| r.chunks.last()).map(|c| c.cursor),
            cursor_clamps: rollouts.iter().map(|r| r.clamps).sum(),
            ..Default::default()
        };
        dmd_step(student, scores, cfg, dcfg, dcfg.stage2_lr_scale, &mut rng, &mut rec, |g, p| {
            rollouts
                .iter()
                .map(|r| {
                    let n = r.chunks.len();
                    let (mut vs, mut as_) = (Vec::new(), Vec::new());
                    for c in &r.chunks[n - dcfg.loss_window..] {
                        let (xv, xa) = generate(g, p, cfg, &c.ctx, &c.noise_v, &c.noise_a, dcfg.student_steps)?;
                        vs.push(xv);
                        as_.push(xa);
                    }
                    let fv = cfg.geometry.video_frames * dcfg.loss_window;
                    let fa = cfg.geometry.audio_frames() * dcfg.loss_window;
                    GeneratedSample::new(g, window_context(r, dcfg.loss_window)?, g.concat_rows(&vs), g.concat_rows(&as_), fv, fa)
                })
                .collect()
        })?;
        on_record(&rec, student)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn setup() -> (WorldConfig, ModelConfig, ParameterSet<f64>) {
        let world = WorldConfig::default();
        let cfg = ModelConfig::for_world(&world, 8);
        let p = init_params::<f64>(&cfg).unwrap();
        (world, cfg, p)
    }

    fn tiny(steps: usize) -> DistillConfig {
        DistillConfig {
            stage1_steps: steps,
            stage2_steps: steps,
            batch: 1,
            student_steps: 2,
            rollout_chunks: 3,
            loss_window: 2,
            regression_pairs: 2,
            teacher_steps: 2,
            ..Default::default()
        }
    }

    fn request(world: &WorldConfig, seed: u64) -> StreamRequest<f64> {
        StreamRequest::from_sample(&gen_sample::<f64>(world, 40, seed).unwrap())
    }

    #[test]
    fn identical_scores_give_zero_student_gradient() {
        let (world, cfg, teacher) = setup();
        let mut student = teacher.clone();
        let mut scores = ScorePair::new(teacher.clone());
        let mut recs = Vec::new();
        let dcfg = DistillConfig { regression_pairs: 0, ..tiny(1) };
        stage1(&world, &cfg, &dcfg, &mut student, &mut scores, |r, _| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(recs[0].dmd_norm, 0.0);
        assert_eq!(recs[0].generator_loss, 0.0);
        for (n, t) in teacher.iter() {
            assert_eq!(student.get(n).unwrap().data(), t.data(), "{n} moved");
        }
    }

    #[test]
    fn regression_targets_are_teacher_samples() {
        let (world, cfg, teacher) = setup();
        let dcfg = tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = regression_pairs(&world, &cfg, &dcfg, &teacher, &mut rng).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            let (v, a) = sample_chunk(&teacher, &cfg, &p.item.ctx, &p.item.noise_v, &p.item.noise_a, &uniform_schedule(2)).unwrap();
            assert_eq!((v, a), (p.y_v.clone(), p.y_a.clone()));
        }
        // A student equal to a 2-step teacher reproduces its own targets: no regression loss.
        let mut student = teacher.clone();
        let mut scores = ScorePair::new(teacher.clone());
        let dcfg = DistillConfig { student_steps: 2, ..dcfg };
        let mut rec = Vec::new();
        stage1(&world, &cfg, &dcfg, &mut student, &mut scores, |r, _| {
            rec.push(r.regression_loss);
            Ok(())
        })
        .unwrap();
        assert!(rec[0] < 1e-20, "{}", rec[0]);
    }

    #[test]
    fn real_score_stays_frozen_while_fake_moves() {
        let (world, cfg, teacher) = setup();
        let mut student = teacher.clone();
        let mut scores = ScorePair::new(teacher.clone());
        let dcfg = DistillConfig { student_lr: 1e-3, fake_score_lr: 1e-3, stage1_lr_scale: 1.0, ..tiny(3) };
        stage1(&world, &cfg, &dcfg, &mut student, &mut scores, |_, _| Ok(())).unwrap();
        for (n, t) in teacher.iter() {
            assert_eq!(scores.real().get(n).unwrap().data(), t.data());
        }
        assert!(teacher.iter().any(|(n, t)| scores.fake.get(n).unwrap().data() != t.data()));
        assert!(teacher.iter().any(|(n, t)| student.get(n).unwrap().data() != t.data()));
        // Only denoiser weights are distilled.
        for (n, t) in teacher.iter().filter(|(n, _)| !is_denoiser_param(n)) {
            assert_eq!(student.get(n).unwrap().data(), t.data(), "{n}");
        }
    }

    #[test]
    fn fake_update_scales_linearly_with_lr() {
        let (world, cfg, teacher) = setup();
        let delta = |lr: f64| {
            let mut student = teacher.clone();
            let mut scores = ScorePair::new(teacher.clone());
            let dcfg = DistillConfig { fake_score_lr: lr, ..tiny(1) };
            stage1(&world, &cfg, &dcfg, &mut student, &mut scores, |_, _| Ok(())).unwrap();
            let n = "dit.video_in.w";
            let (a, b) = (scores.fake.get(n).unwrap(), teacher.get(n).unwrap());
            a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect::<Vec<_>>()
        };
        let (d1, d2) = (delta(1e-4), delta(2e-4));
        assert!(d1.iter().any(|&x| x != 0.0));
        for (a, b) in d1.iter().zip(&d2) {
            assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} {b}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (_, cfg, teacher) = setup();
        let other = ModelConfig::for_world(&WorldConfig::default(), 16);
        let mut student = init_params::<f64>(&other).unwrap();
        let mut scores = ScorePair::new(teacher);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = dmd_step(&mut student, &mut scores, &cfg, &tiny(1), 1.0, &mut rng, &mut DistillRecord::default(), |_, _| Ok(Vec::new()));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn second_chunk_packs_sink_and_own_motion() {
        let (world, cfg, p) = setup();
        let r = rollout(&world, &cfg, &p, request(&world, 4), 2, 2, true, 7).unwrap();
        let (c1, c2) = (&r.chunks[0], &r.chunks[1]);
        assert!(c1.ctx.sink.is_none() && c1.ctx.motion.is_none());
        assert_eq!(c2.ctx.sink.as_ref().unwrap(), &c1.video);
        let m = c2.ctx.motion.as_ref().unwrap();
        assert_eq!(m.frames(), cfg.geometry.motion_frames);
        assert_eq!(m.tensor(), c1.video.tensor());
        assert_eq!(m.provenance, Provenance::Generated);
        assert!(rollout(&world, &cfg, &p, request(&world, 4), 1, 2, true, 7).is_err());
    }

    #[test]
    fn sink_flag_only_removes_the_sink() {
        let (world, cfg, p) = setup();
        let on = rollout(&world, &cfg, &p, request(&world, 5), 2, 2, true, 9).unwrap();
        let off = rollout(&world, &cfg, &p, request(&world, 5), 2, 2, false, 9).unwrap();
        assert_eq!(on.chunks[0].video, off.chunks[0].video);
        let (a, b) = (&on.chunks[1].ctx, &off.chunks[1].ctx);
        assert!(a.sink.is_some() && b.sink.is_none());
        assert_eq!(a.motion, b.motion);
        assert_eq!(a.window, b.window);
        assert_eq!(a.history, b.history);
        assert_eq!(on.chunks[1].noise_v, off.chunks[1].noise_v);
    }

    #[test]
    fn cursor_accumulates_increments_within_bounds() {
        let (world, cfg, p) = setup();
        for seed in 0..3 {
            let r = rollout(&world, &cfg, &p, request(&world, seed), 5, 2, true, seed).unwrap();
            let mut total = 0.0;
            for c in &r.chunks {
                assert!(c.cursor >= c.cursor_before);
                total += c.cursor - c.cursor_before;
            }
            let last = r.chunks.last().unwrap().cursor;
            assert!((total - last).abs() < 1e-9);
            assert!(last <= r.transcript.len() as f64);
        }
    }

    #[test]
    fn loss_window_covers_the_last_chunks() {
        let (world, cfg, p) = setup();
        let r = rollout(&world, &cfg, &p, request(&world, 6), 5, 2, true, 1).unwrap();
        let ctx = window_context(&r, 3).unwrap();
        let first = &r.chunks[2];
        let s_hat = r.chunks[4].cursor - first.window_start as f64;
        let k = (s_hat.ceil() as usize).clamp(1, first.ctx.window.len());
        assert_eq!(ctx.window, first.ctx.window[..k].to_vec());
        assert_eq!(ctx.motion, first.ctx.motion);
        assert!(window_context(&r, 6).is_err() && window_context(&r, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        assert!(DistillConfig { loss_window: 6, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { student_steps: 0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { t_range: (0.0, 0.5), ..Default::default() }.validate().is_err());
    }
}
