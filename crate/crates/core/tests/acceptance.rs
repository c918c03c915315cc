//! End-to-end acceptance checks. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any fails.
//!
//! Criteria 5 to 7 and 11 share one trained teacher and its distilled students.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamchar::autodiff::Graph;
use streamchar::distill::{rollout, stage1, stage2, DistillConfig, ScorePair};
use streamchar::eval::{moment_match, wer_proxy};
use streamchar::flowcore::{corrupt, noise_like, sample, uniform_schedule, velocity_target, STUDENT_STEPS, TEACHER_STEPS};
use streamchar::jointnet::{forward, pack};
use streamchar::latent::{LatentBlock, Modality};
use streamchar::model::{init_params, ChunkField, ModelConfig};
use streamchar::params::{Bound, ParameterSet};
use streamchar::rope::{rotary_table, PositionAssignment, RopeConfig};
use streamchar::stream::{drift, quality_proxy, schedule, stream_audio, stream_video, ReferenceStats, StageDurations, StepOutcome, StreamConfig, StreamRequest, Streamer, CHUNK_BUDGET_S};
use streamchar::synthworld::{gen_sample, WorldConfig};
use streamchar::tensor::Tensor;
use streamchar::train::{draw_example, example_losses, noisy, train_teacher, TrainConfig};
use streamchar::Params;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Runner {
    failed: usize,
}

impl Runner {
    fn run(&mut self, id: usize, name: &str, budget_s: f64, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        let out = match out {
            Ok(d) if secs > budget_s => Err(format!("{d}; runtime {secs:.1}s over the {budget_s}s budget")),
            o => o,
        };
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if out.is_err() {
            self.failed += 1;
        }
        println!("criterion {id:>2} [{tag}] {name} ({secs:.1}s): {detail}");
    }
}

// 1
fn flow_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (c, f, h, w, fa) = (rng.gen_range(1..5), rng.gen_range(1..10), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..40));
        let z_v = noise_like(&LatentBlock::<f64>::zeros_video(c, f, h, w), &mut rng);
        let z_a = noise_like(&LatentBlock::<f64>::zeros_audio(fa, c), &mut rng);
        let e_v = noise_like(&z_v, &mut rng);
        let e_a = noise_like(&z_a, &mut rng);
        let s0 = corrupt(&z_v, &z_a, &e_v, &e_a, 0.0).unwrap();
        let s1 = corrupt(&z_v, &z_a, &e_v, &e_a, 1.0).unwrap();
        if s0.x_v.tensor() != z_v.tensor() || s0.x_a.tensor() != z_a.tensor() || s1.x_v.tensor() != e_v.tensor() || s1.x_a.tensor() != e_a.tensor() {
            return Err("endpoint corruption is not exact".into());
        }
        let t: f64 = rng.gen();
        let st = corrupt(&z_v, &z_a, &e_v, &e_a, t).unwrap();
        for (x, z, e) in [(&st.x_v, &z_v, &e_v), (&st.x_a, &z_a, &e_a)] {
            let v = velocity_target(z, e).unwrap();
            let rec = x.tensor().zip_map(v.tensor(), |x, v| x - t * v).unwrap();
            worst = worst.max(rec.max_abs_diff(z.tensor()));
        }
    }
    ensure(worst < 1e-6, format!("endpoints exact, worst |x − t·v − z| = {worst:.2e} over 1000 draws"))
}

// 2
fn gradient_suite() -> Outcome {
    let world = WorldConfig::default();
    let cfg = ModelConfig::for_world(&world, 8);
    let params = init_params::<f64>(&cfg).unwrap();
    let tcfg = TrainConfig { sample_tokens: 24, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // A later chunk so sink, motion and history all enter the graph.
    let ex = loop {
        let ex = draw_example::<f64>(&world, &cfg, &tcfg, &mut rng).unwrap();
        if ex.ctx.sink.is_some() && ex.ctx.history.frames() > 0 {
            break noisy(ex, &mut rng);
        }
    };
    let loss = |p: &ParameterSet<f64>| {
        let g = Graph::new();
        let b = Bound::new(&g, p, false);
        let (f, pl, _) = example_losses(&g, &b, &cfg, &ex).unwrap();
        g.scalar(g.add(f, pl))
    };
    let g = Graph::new();
    let b = Bound::new(&g, &params, true);
    let (f, pl, _) = example_losses(&g, &b, &cfg, &ex).unwrap();
    let grads = b.grads(&params, &g.backward(g.add(f, pl)));

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let (mut tensors, mut elems) = (0, 0);
    let mut groups = [0usize; 3];
    for (name, t) in params.iter() {
        let group = ["dit.", "orch.", "pap."].iter().position(|p| name.starts_with(p));
        match group {
            Some(i) => groups[i] += 1,
            None => return Err(format!("parameter `{name}` belongs to no component")),
        }
        let an = grads.get(name).unwrap();
        let mut fd = Tensor::<f64>::zeros(t.shape());
        for i in 0..t.len() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += h;
            let up = loss(&p);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = loss(&p);
            fd.data_mut()[i] = (up - down) / (2.0 * h);
        }
        let diff = fd.zip_map(an, |a, b| a - b).unwrap().sq_norm().sqrt();
        // Floor covers tensors whose exact gradient vanishes (a key bias under softmax).
        let scale = fd.sq_norm().sqrt().max(an.sq_norm().sqrt()).max(1e-5);
        let e = diff / scale;
        if e > worst.0 {
            worst = (e, name.to_string());
        }
        tensors += 1;
        elems += t.len();
    }
    let detail = format!(
        "{tensors} tensors / {elems} entries (dit {}, orch {}, pap {}), worst relative error {:.2e} at `{}`",
        groups[0], groups[1], groups[2], worst.0, worst.1
    );
    ensure(worst.0 < 1e-4 && groups.iter().all(|&n| n > 0), detail)
}

// 3
fn rope_alignment() -> Outcome {
    let cfg = RopeConfig::default();
    let hd = 16;
    let mut worst = 0.0f64;
    for tau in -16i64..=16 {
        for p in 0..hd / 2 {
            worst = worst.max((cfg.angle(tau, p, hd, Modality::Video) - cfg.angle(4 * tau, p, hd, Modality::Audio)).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("angle mismatch {worst:.2e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pos = |i: i64, m: Modality| PositionAssignment { temporal_index: i, modality: m, base_frequency_scale: cfg.scale(m) };
    let dot = |q: &Tensor<f64>, k: &Tensor<f64>, a: PositionAssignment, b: PositionAssignment| {
        let g = Graph::new();
        let rq = g.tensor(g.rotary(g.constant(q.clone()), rotary_table(&cfg, &[a], hd)));
        let rk = g.tensor(g.rotary(g.constant(k.clone()), rotary_table(&cfg, &[b], hd)));
        rq.data().iter().zip(rk.data()).map(|(x, y)| x * y).sum::<f64>()
    };
    let mut rel = 0.0f64;
    for _ in 0..200 {
        let q = Tensor::from_vec(&[1, hd], (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let k = Tensor::from_vec(&[1, hd], (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (m, n, s) = (rng.gen_range(-16..16), rng.gen_range(-16..16), rng.gen_range(-16..16));
        let base = dot(&q, &k, pos(m, Modality::Video), pos(n, Modality::Video));
        let shifted = dot(&q, &k, pos(m + s, Modality::Video), pos(n + s, Modality::Video));
        let audio = dot(&q, &k, pos(4 * m, Modality::Audio), pos(4 * n, Modality::Audio));
        let mixed = dot(&q, &k, pos(m, Modality::Video), pos(4 * n, Modality::Audio));
        for other in [shifted, audio, mixed] {
            rel = rel.max((base - other).abs() / base.abs().max(1e-3));
        }
    }
    ensure(rel < 1e-5, format!("angles agree to {worst:.1e}; relative-position scores agree to {rel:.2e}"))
}

// 4
fn mask_and_cache() -> Outcome {
    let world = WorldConfig::default();
    let cfg = ModelConfig::for_world(&world, 8);
    let params = init_params::<f64>(&cfg).unwrap();
    let tcfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let ex = draw_example::<f64>(&world, &cfg, &tcfg, &mut rng).unwrap();
        let nv = noise_like(&ex.z_v, &mut rng);
        let na = noise_like(&ex.z_a, &mut rng);
        let run = |cache: bool| {
            let mut field = ChunkField::new(&params, &cfg, &ex.ctx, cache).unwrap();
            sample(&mut field, &nv, &na, &uniform_schedule(STUDENT_STEPS)).unwrap()
        };
        let (v0, a0) = run(false);
        let (v1, a1) = run(true);
        worst = worst.max(v0.tensor().max_abs_diff(v1.tensor())).max(a0.tensor().max_abs_diff(a1.tensor()));
    }
    if worst >= 1e-5 {
        return Err(format!("cached and uncached samples differ by {worst:.2e}"));
    }
    let d = &cfg.denoiser;
    let dit = params.subset("dit.");
    let v = |f: usize, rng: &mut ChaCha8Rng| noise_like(&LatentBlock::<f64>::zeros_video(d.video_channels, f, 2, 2), rng);
    let (r, m, s) = (v(1, &mut rng), v(9, &mut rng), v(9, &mut rng));
    let c_a = noise_like(&LatentBlock::<f64>::zeros_audio(36, d.cond_dim), &mut rng).tensor().clone();
    let hidden = |x_v: &LatentBlock<f64>, x_a: &LatentBlock<f64>, t: f64| {
        let seq = pack(d, Some(1), &r, Some(&m), Some(&s), x_v, x_a).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &dit, false);
        let out = forward(&g, &p, d, &seq, None, g.constant(c_a.clone()), t, None).unwrap();
        let h = g.tensor(out.hidden);
        h.data()[..seq.n_cond * d.model_dim].to_vec()
    };
    let mut rng2 = ChaCha8Rng::seed_from_u64(40);
    let (xv, xa) = (v(9, &mut rng2), noise_like(&LatentBlock::<f64>::zeros_audio(36, d.audio_channels), &mut rng2));
    let base = hidden(&xv, &xa, 0.7);
    let mut same = true;
    for t in [0.1, 0.5, 0.9] {
        let (pv, pa) = (v(9, &mut rng2), noise_like(&xa, &mut rng2));
        same &= hidden(&pv, &pa, t) == base;
    }
    ensure(same, format!("cached vs uncached 4-step samples differ by {worst:.2e}; condition states bit-identical under noisy-token perturbation: {same}"))
}

struct Trained {
    world: WorldConfig,
    cfg: ModelConfig,
    teacher: Params,
}

// 5
fn teacher_training(slot: &mut Option<Trained>) -> Outcome {
    let world = WorldConfig::default();
    let cfg = ModelConfig::for_world(&world, 32);
    let tcfg = TrainConfig::default();
    let (teacher, report) = train_teacher::<f32>(&world, &cfg, &tcfg, None, |_, _| {}).map_err(|e| e.to_string())?;
    let (i, l) = (report.initial, report.last);
    let ratio = l.flow_loss / i.flow_loss;
    *slot = Some(Trained { world, cfg, teacher });
    ensure(
        ratio <= 0.5 && l.pap_mae < 0.5,
        format!("flow loss {:.3} → {:.3} ({:.0}% of step 0), PAP MAE {:.3} tokens", i.flow_loss, l.flow_loss, 100.0 * ratio, l.pap_mae),
    )
}

fn need(t: &Option<Trained>) -> Result<&Trained, String> {
    t.as_ref().ok_or_else(|| "no trained teacher".to_string())
}

// 6
fn stage_one(t: &Trained, student: &mut Option<Params>) -> Outcome {
    let dcfg = DistillConfig::default();
    let mut s = t.teacher.clone();
    let mut scores = ScorePair::new(t.teacher.clone());
    stage1(&t.world, &t.cfg, &dcfg, &mut s, &mut scores, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let m = moment_match(&t.world, &t.cfg, &t.teacher, &s, 512, TEACHER_STEPS, dcfg.student_steps, 0.15, 6).map_err(|e| e.to_string())?;
    *student = Some(s);
    ensure(
        m.passed(),
        format!(
            "{} steps; worst mean gap {:.3} σ, worst variance ratio gap {:.3}; {}/{} dims outside 15%",
            dcfg.stage1_steps, m.worst_mean, m.worst_var, m.failures, m.dims
        ),
    )
}

fn drift_of(t: &Trained, student: &Params, sink: bool, seed: u64, chunks: usize, stats: &ReferenceStats) -> f64 {
    let sample = gen_sample::<f32>(&t.world, 16 * chunks, 1000 + seed).unwrap();
    let r = rollout(&t.world, &t.cfg, student, StreamRequest::from_sample(&sample), chunks, STUDENT_STEPS, sink, seed).unwrap();
    assert_eq!(r.chunks.len(), chunks, "rollout ended early");
    let video = stream_video(&r.chunks).unwrap();
    drift(&quality_proxy(&video, stats), 30, 5).unwrap()
}

// 7
fn sink_ablation(t: &Trained, stage1_student: &Params) -> Outcome {
    let stats = ReferenceStats::from_world(&t.world, 200, 60, 999).unwrap();
    let finetune = |sink: bool| {
        let dcfg = DistillConfig { sink, ..DistillConfig::default() };
        let mut s = stage1_student.clone();
        let mut scores = ScorePair::new(t.teacher.clone());
        stage2(&t.world, &t.cfg, &dcfg, &mut s, &mut scores, |_, _| Ok(())).map(|_| s).map_err(|e| e.to_string())
    };
    let with = finetune(true)?;
    let without = finetune(false)?;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let a = drift_of(t, &with, true, seed, 20, &stats);
        let b = drift_of(t, &without, false, seed, 20, &stats);
        wins += usize::from(a < b);
        pairs.push(format!("{a:.4}/{b:.4}"));
    }
    ensure(wins >= 8, format!("drift with < without sink in {wins}/10 seeds (with/without: {})", pairs.join(" ")))
}

// 8
fn drift_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let segment = if case < 50 { 30 } else { rng.gen_range(1..40) };
        let probe = if case < 50 { 5 } else { rng.gen_range(1..=segment) };
        let n = rng.gen_range(segment..segment * 6 + 1);
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum = |s: &[f64]| {
            let mut acc = 0.0;
            for x in s {
                acc += x;
            }
            acc / s.len() as f64
        };
        let first = sum(&q[..probe]);
        let mut best = 0.0f64;
        let mut k = 1;
        while k * segment <= n {
            let end = k * segment;
            let gap = (sum(&q[end - probe..end]) - first).abs();
            if gap > best {
                best = gap;
            }
            k += 1;
        }
        let got = drift(&q, segment, probe).unwrap();
        if got != best {
            return Err(format!("case {case}: drift {got} vs scan {best}"));
        }
    }
    ensure(true, "100 random series match the brute-force segment scan exactly".into())
}

// 9
fn latency() -> Outcome {
    let r = StageDurations::REFERENCE;
    let seq = r.sequential();
    let per = schedule(&[r; 8], true).unwrap();
    let steady = per[per.len() - 1];
    let mut errs = Vec::new();
    // The stated figures are rounded to two decimals.
    let rounds_to = |x: f64, y: f64| (x - y).abs() <= 0.005 + 1e-12;
    if (seq - 1.335).abs() > 1e-12 || !rounds_to(seq, 1.34) {
        errs.push(format!("sequential {seq}"));
    }
    if (CHUNK_BUDGET_S - 1.375).abs() > 1e-12 || !rounds_to(CHUNK_BUDGET_S, 1.38) {
        errs.push(format!("budget {CHUNK_BUDGET_S}"));
    }
    if (steady - 1.285).abs() > 1e-12 || steady > seq || (per[0] - seq).abs() > 1e-12 {
        errs.push(format!("overlap schedule {per:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let n = rng.gen_range(1..12);
        let st: Vec<StageDurations> = (0..n)
            .map(|_| StageDurations {
                generate_s: rng.gen_range(0.0..2.0),
                decode_s: rng.gen_range(0.0..1.0),
                preprocess_s: rng.gen_range(0.0..1.0),
                write_s: rng.gen_range(0.0..0.2),
            })
            .collect();
        let o = schedule(&st, true).unwrap();
        let s = schedule(&st, false).unwrap();
        let (mut to, mut ts) = (0.0, 0.0);
        for (a, b) in o.iter().zip(&s) {
            to += a;
            ts += b;
            if *a > b + 1e-12 || to > ts + 1e-9 {
                errs.push(format!("case {case}: overlap {o:?} exceeds sequential {s:?}"));
                break;
            }
        }
    }
    ensure(errs.is_empty(), if errs.is_empty() { format!("sequential {seq:.3}s, overlapped {steady:.3}s, budget {CHUNK_BUDGET_S:.3}s; 1000 random cases hold") } else { errs.join("; ") })
}

// 10
fn streaming_invariants(t: &Trained, student: &Params) -> Outcome {
    let sample = gen_sample::<f32>(&t.world, 800, 10).unwrap();
    let cap = t.cfg.geometry.history_cap_frames(&t.world);
    let mut s = Streamer::new(&t.world, student, &t.cfg, StreamConfig::default(), StreamRequest::from_sample(&sample)).map_err(|e| e.to_string())?;
    let (mut last, mut sink_bits, mut n) = (0.0, None::<Vec<u32>>, 0);
    let mut max_hist = 0;
    while n < 50 {
        let c = match s.step().map_err(|e| e.to_string())? {
            StepOutcome::Chunk(c) => c,
            StepOutcome::EndOfStream => return Err(format!("transcript exhausted after {n} chunks")),
        };
        n += 1;
        if c.cursor < last {
            return Err(format!("cursor regressed at chunk {}", c.index));
        }
        last = c.cursor;
        let bits: Vec<u32> = s.state().sink.as_ref().ok_or("sink missing")?.tensor().data().iter().map(|x| x.to_bits()).collect();
        match &sink_bits {
            None => sink_bits = Some(bits),
            Some(b) if *b != bits => return Err(format!("sink changed at chunk {}", c.index)),
            _ => {}
        }
        if s.encodes_since_first_chunk() != 0 {
            return Err(format!("{} encode calls after chunk 1", s.encodes_since_first_chunk()));
        }
        max_hist = max_hist.max(s.state().history.frames()).max(c.ctx.history.frames());
        if max_hist > cap {
            return Err(format!("history of {max_hist} frames exceeds {cap}"));
        }
    }
    ensure(true, format!("50 chunks; cursor monotone to {last:.2}; sink bit-stable; 0 encodes after chunk 1; history ≤ {max_hist}/{cap} frames"))
}

// 11
fn wer_sanity(t: &Trained) -> Outcome {
    let mut gt = 0.0f64;
    for seed in 0..10 {
        let s = gen_sample::<f32>(&t.world, 30, 5000 + seed).unwrap();
        let id: Vec<f64> = s.identity.iter().map(|&x| f64::from(x)).collect();
        gt = gt.max(wer_proxy(&t.world, &s.audio, &t.world.timbre(&id), &s.tokens).unwrap());
    }
    let untrained = init_params::<f32>(&t.cfg).unwrap();
    let score = |p: &Params| {
        let mut total = 0.0;
        for seed in 0..8 {
            let s = gen_sample::<f32>(&t.world, 24, 6000 + seed).unwrap();
            let id: Vec<f64> = s.identity.iter().map(|&x| f64::from(x)).collect();
            let chunks = s.audio.frames().div_ceil(t.cfg.geometry.audio_frames());
            let cfg = StreamConfig { sampling_steps: TEACHER_STEPS, ..StreamConfig::default() };
            let mut st = Streamer::new(&t.world, p, &t.cfg, cfg, StreamRequest::from_sample(&s)).unwrap();
            let out = st.run(chunks, |_| Ok(())).unwrap();
            total += wer_proxy(&t.world, &stream_audio(&out).unwrap(), &t.world.timbre(&id), &s.tokens).unwrap();
        }
        total / 8.0
    };
    let (w_teacher, w_untrained) = (score(&t.teacher), score(&untrained));
    ensure(
        gt == 0.0 && w_teacher < w_untrained,
        format!("ground truth WER {gt}; teacher {w_teacher:.3} vs untrained {w_untrained:.3} on 8 held-out transcripts"),
    )
}

fn main() {
    let mut r = Runner { failed: 0 };
    r.run(1, "flow identities", 1.0, flow_identities);
    r.run(2, "gradient suite", 120.0, gradient_suite);
    r.run(3, "rope alignment", 60.0, rope_alignment);
    r.run(4, "mask and cache", 60.0, mask_and_cache);

    let mut trained = None;
    r.run(5, "teacher training", 900.0, || teacher_training(&mut trained));
    let mut student = None;
    r.run(6, "stage I distillation", 900.0, || stage_one(need(&trained)?, &mut student));
    r.run(7, "stage II sink ablation", 1800.0, || sink_ablation(need(&trained)?, student.as_ref().ok_or("no stage I student")?));
    r.run(8, "drift oracle", 10.0, drift_oracle);
    r.run(9, "latency arithmetic", 10.0, latency);
    r.run(10, "streaming invariants", 600.0, || {
        let t = need(&trained)?;
        streaming_invariants(t, student.as_ref().unwrap_or(&t.teacher))
    });
    r.run(11, "WER proxy sanity", 600.0, || wer_sanity(need(&trained)?));

    if r.failed > 0 {
        println!("{} of 11 criteria failed", r.failed);
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}
