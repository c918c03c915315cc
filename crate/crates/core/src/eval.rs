//! Evaluation: WER proxy, student/teacher moment matching and pointer accuracy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ChunkRecord, StreamHeader};
use crate::error::{Error, Result};
use crate::flowcore::{noise_like, uniform_schedule};
use crate::latent::LatentBlock;
use crate::model::{sample_chunk, ModelConfig};
use crate::params::ParameterSet;
use crate::scalar::Real;
use crate::stream::{drift, quality_proxy, ReferenceStats, CHUNK_BUDGET_S};
use crate::synthworld::{decode_transcript, WorldConfig};
use crate::train::{draw_example, TrainConfig};

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate of `hypothesis` against a non-empty `reference`.
pub fn wer(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Precondition("empty reference transcript".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// WER of nearest-signature decoding of `audio` against `reference`.
pub fn wer_proxy<T: Real>(world: &WorldConfig, audio: &LatentBlock<T>, timbre: &[f64], reference: &[u32]) -> Result<f64> {
    wer(reference, &decode_transcript(world, audio, timbre))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub samples: usize,
    pub dims: usize,
    /// Largest `|mean_s − mean_t| / std_t` over dimensions.
    pub worst_mean: f64,
    /// Largest `|var_s / var_t − 1|` over dimensions.
    pub worst_var: f64,
    /// Dimensions outside the tolerance.
    pub failures: usize,
    pub tolerance: f64,
}

impl MomentReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Per-dimension moments of flattened samples.
pub fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let var = (0..d).map(|j| samples.iter().map(|s| (s[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).collect();
    (mean, var)
}

pub fn compare_moments(student: &[Vec<f64>], teacher: &[Vec<f64>], tolerance: f64) -> MomentReport {
    let (ms, vs) = moments(student);
    let (mt, vt) = moments(teacher);
    let (mut worst_mean, mut worst_var, mut failures) = (0.0f64, 0.0f64, 0);
    for j in 0..ms.len() {
        let em = (ms[j] - mt[j]).abs() / vt[j].sqrt().max(1e-12);
        let ev = (vs[j] / vt[j].max(1e-12) - 1.0).abs();
        if em > tolerance || ev > tolerance {
            failures += 1;
        }
        worst_mean = worst_mean.max(em);
        worst_var = worst_var.max(ev);
    }
    MomentReport { samples: student.len(), dims: ms.len(), worst_mean, worst_var, failures, tolerance }
}

/// Samples both models on the same held-out contexts and noise and compares
/// per-dimension moments of the generated chunks.
#[allow(clippy::too_many_arguments)]
pub fn moment_match<T: Real>(
    world: &WorldConfig,
    cfg: &ModelConfig,
    teacher: &ParameterSet<T>,
    student: &ParameterSet<T>,
    n: usize,
    teacher_steps: usize,
    student_steps: usize,
    tolerance: f64,
    seed: u64,
) -> Result<MomentReport> {
    if n < 2 {
        return Err(Error::Precondition("moment matching needs at least two samples".into()));
    }
    let tcfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = |(v, a): (LatentBlock<T>, LatentBlock<T>)| -> Vec<f64> {
        v.tensor().data().iter().chain(a.tensor().data()).map(|x| x.as_f64()).collect()
    };
    let (mut s, mut t) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let ex = draw_example::<T>(world, cfg, &tcfg, &mut rng)?;
        let nv = noise_like(&ex.z_v, &mut rng);
        let na = noise_like(&ex.z_a, &mut rng);
        s.push(flat(sample_chunk(student, cfg, &ex.ctx, &nv, &na, &uniform_schedule(student_steps))?));
        t.push(flat(sample_chunk(teacher, cfg, &ex.ctx, &nv, &na, &uniform_schedule(teacher_steps))?));
    }
    Ok(compare_moments(&s, &t, tolerance))
}

/// Metrics of a finished stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub chunks: usize,
    pub transcript_len: usize,
    pub final_cursor: f64,
    /// Against the transcript prefix the cursor claims was spoken.
    pub wer_proxy: Option<f64>,
    /// Needs at least one full drift segment of video.
    pub drift: Option<f64>,
    pub cursor_monotone: bool,
    pub cursor_in_range: bool,
    pub real_time_fraction: f64,
    pub mean_wall_s: f64,
    pub max_wall_s: f64,
    pub budget_s: f64,
}

pub const DRIFT_SEGMENT_S: usize = 30;
pub const DRIFT_PROBE_S: usize = 5;

pub fn evaluate_stream<T: Real>(header: &StreamHeader, records: &[ChunkRecord<T>], stats: &ReferenceStats) -> Result<StreamReport> {
    let n = header.transcript.len();
    let final_cursor = records.last().map_or(0.0, |r| r.cursor);
    let cursor_monotone = records.windows(2).all(|w| w[1].cursor >= w[0].cursor);
    let cursor_in_range = records.iter().all(|r| (0.0..=n as f64).contains(&r.cursor));
    let (wer_proxy, drift) = if records.is_empty() {
        (None, None)
    } else {
        let audio = LatentBlock::concat_frames(&records.iter().map(|r| &r.audio).collect::<Vec<_>>())?;
        let video = LatentBlock::concat_frames(&records.iter().map(|r| &r.video).collect::<Vec<_>>())?;
        let spoken = (final_cursor.ceil() as usize).min(n);
        let w = if spoken > 0 { Some(wer_proxy(&header.world, &audio, &header.timbre, &header.transcript[..spoken])?) } else { None };
        let q = quality_proxy(&video, stats);
        let d = if q.len() >= DRIFT_SEGMENT_S { Some(drift(&q, DRIFT_SEGMENT_S, DRIFT_PROBE_S)?) } else { None };
        (w, d)
    };
    let walls: Vec<f64> = records.iter().map(|r| r.latency.wall_s).collect();
    let k = walls.len().max(1) as f64;
    Ok(StreamReport {
        chunks: records.len(),
        transcript_len: n,
        final_cursor,
        wer_proxy,
        drift,
        cursor_monotone,
        cursor_in_range,
        real_time_fraction: records.iter().filter(|r| r.latency.real_time).count() as f64 / k,
        mean_wall_s: walls.iter().sum::<f64>() / k,
        max_wall_s: walls.iter().copied().fold(0.0, f64::max),
        budget_s: CHUNK_BUDGET_S,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::gen_sample;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[1, 2, 3], &[4, 5, 6, 7]), 4);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert!(wer(&[], &[1]).is_err());
    }

    #[test]
    fn ground_truth_audio_decodes_exactly() {
        let world = WorldConfig::default();
        for seed in 0..5 {
            let s = gen_sample::<f64>(&world, 20, seed).unwrap();
            let id: Vec<f64> = s.identity.clone();
            assert_eq!(wer_proxy(&world, &s.audio, &world.timbre(&id), &s.tokens).unwrap(), 0.0);
        }
    }

    #[test]
    fn identical_samples_match_exactly() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 0.0], vec![0.5, 1.0]];
        let r = compare_moments(&a, &a, 0.15);
        assert!(r.passed() && r.worst_mean == 0.0 && r.worst_var == 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|s| s.iter().map(|x| 2.0 * x).collect()).collect();
        assert!(!compare_moments(&b, &a, 0.15).passed());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn edit_distance_is_a_metric(
                a in prop::collection::vec(0u32..6, 0..20),
                b in prop::collection::vec(0u32..6, 0..20),
                c in prop::collection::vec(0u32..6, 0..20),
            ) {
                let d = edit_distance(&a, &b);
                prop_assert_eq!(d, edit_distance(&b, &a));
                prop_assert_eq!(edit_distance(&a, &a), 0);
                prop_assert!(d <= a.len().max(b.len()));
                prop_assert!(d >= a.len().abs_diff(b.len()));
                prop_assert!(edit_distance(&a, &c) <= d + edit_distance(&b, &c));
            }
        }
    }
}
