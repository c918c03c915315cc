//! Progress-aware pointer: predicts how far into the transcript window a chunk
//! of audio has spoken.
//!
//! Each audio frame cross-attends over the transcript states; its soft
//! position is the attention-weighted token index. A learned per-frame offset
//! refines it and a softmax over per-frame scores pools the frames into the
//! endpoint `ŝ = clamp(Σ_j w_j (p_j + δ_j), 0, N)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, linear};
use crate::params::{Bound, Init, ParameterSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PapConfig {
    /// Width of the audio condition and of the transcript states.
    pub input_dim: usize,
    pub attn_dim: usize,
    pub hidden: usize,
    /// Longest transcript window and chunk the positional tables cover.
    pub max_window: usize,
    pub max_frames: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for PapConfig {
    fn default() -> Self {
        Self { input_dim: 32, attn_dim: 16, hidden: 32, max_window: 40, max_frames: 36, beta: 1.0, seed: 17 }
    }
}

/// Values of one pointer evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PointerOutput<T> {
    pub s_hat: T,
    pub p: Vec<T>,
    pub delta: Vec<T>,
    pub w: Vec<T>,
}

/// Graph handles of one pointer evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PointerVars {
    pub s_hat: Var,
    /// `J × 1`.
    pub p: Var,
    /// `J × 1`.
    pub delta: Var,
    /// `1 × J`.
    pub w: Var,
    /// `J × N` attention.
    pub alpha: Var,
}

impl PointerVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> PointerOutput<T> {
        PointerOutput {
            s_hat: g.scalar(self.s_hat),
            p: g.tensor(self.p).into_data(),
            delta: g.tensor(self.delta).into_data(),
            w: g.tensor(self.w).into_data(),
        }
    }
}

/// Expected token index under each row of `alpha` (`J × N`): `p_j = Σ_i α_ji·i`.
pub fn expected_index<T: Real>(g: &Graph<T>, alpha: Var) -> Var {
    let (_, n) = g.shape(alpha);
    let idx = Tensor::from_vec(&[n, 1], (0..n).map(|i| T::from_usize(i).unwrap()).collect()).unwrap();
    g.matmul(alpha, g.constant(idx))
}

/// Frame-wise soft positions from cross-attention of `c_a` (`J × d`) over the
/// transcript states `a` (`N × d`). Returns `(p, α)`.
pub fn soft_positions<T: Real>(g: &Graph<T>, p: &Bound, cfg: &PapConfig, a: Var, c_a: Var) -> Result<(Var, Var)> {
    let (n, _) = g.shape(a);
    let (j, _) = g.shape(c_a);
    if n == 0 {
        return Err(Error::Precondition("empty transcript".into()));
    }
    if n > cfg.max_window || j > cfg.max_frames {
        return Err(Error::Shape(format!("pointer covers {} tokens × {} frames, got {n} × {j}", cfg.max_window, cfg.max_frames)));
    }
    let q = g.add(linear(g, p, "pap.q", c_a), g.slice_rows(p.get("pap.frame_emb"), 0, j));
    let k = g.add(linear(g, p, "pap.k", a), g.slice_rows(p.get("pap.pos_emb"), 0, n));
    let logits = g.scale(g.matmul_nt(q, k), T::lit(1.0 / (cfg.attn_dim as f64).sqrt()));
    let alpha = g.softmax(logits, None);
    Ok((expected_index(g, alpha), alpha))
}

/// `clamp(w · (p + δ), 0, N)` with `w` a `1 × J` row and `p`, `δ` columns.
pub fn endpoint<T: Real>(g: &Graph<T>, p: Var, delta: Var, w: Var, n: usize) -> Var {
    let s = g.matmul(w, g.add(p, delta));
    g.clamp(s, T::zero(), T::from_usize(n).unwrap())
}

/// Plain-value form of [`endpoint`].
pub fn endpoint_value<T: Real>(p: &[T], delta: &[T], w: &[T], n: usize) -> T {
    let s: T = p.iter().zip(delta).zip(w).map(|((&p, &d), &w)| w * (p + d)).sum();
    s.max(T::zero()).min(T::from_usize(n).unwrap())
}

/// Full pointer head.
pub fn pointer<T: Real>(g: &Graph<T>, p: &Bound, cfg: &PapConfig, a: Var, c_a: Var) -> Result<PointerVars> {
    let (pos, alpha) = soft_positions(g, p, cfg, a, c_a)?;
    let hidden = g.silu(linear(g, p, "pap.delta.fc1", c_a));
    let delta = linear(g, p, "pap.delta.fc2", hidden);
    let scores = g.transpose(linear(g, p, "pap.score", c_a));
    let w = g.softmax(scores, None);
    let (n, _) = g.shape(a);
    Ok(PointerVars { s_hat: endpoint(g, pos, delta, w, n), p: pos, delta, w, alpha })
}

/// Smooth-ℓ1 between predicted and true endpoints.
pub fn pap_loss<T: Real>(g: &Graph<T>, s_hat: Var, s_true: T, beta: T) -> Var {
    let d = g.sub(s_hat, g.scalar_const(s_true));
    g.sum(g.smooth_l1(d, beta))
}

pub fn pap_loss_value<T: Real>(s_hat: T, s_true: T, beta: T) -> T {
    let d = (s_hat - s_true).abs();
    let half = T::lit(0.5);
    if d < beta {
        half * d * d / beta
    } else {
        d - half * beta
    }
}

/// First `ceil(ŝ)` tokens: the token being spoken is kept.
pub fn truncate_transcript(transcript: &[u32], s_hat: f64) -> &[u32] {
    let k = (s_hat.max(0.0).ceil() as usize).min(transcript.len());
    &transcript[..k]
}

pub fn init_params<T: Real>(cfg: &PapConfig) -> ParameterSet<T> {
    let mut ps = ParameterSet::new();
    let mut init = Init::new(cfg.seed);
    layers::init_linear(&mut ps, &mut init, "pap.q", cfg.input_dim, cfg.attn_dim);
    layers::init_linear(&mut ps, &mut init, "pap.k", cfg.input_dim, cfg.attn_dim);
    ps.insert("pap.frame_emb", init.normal(&[cfg.max_frames, cfg.attn_dim], 0.5));
    ps.insert("pap.pos_emb", init.normal(&[cfg.max_window, cfg.attn_dim], 0.5));
    layers::init_linear(&mut ps, &mut init, "pap.delta.fc1", cfg.input_dim, cfg.hidden);
    layers::init_linear(&mut ps, &mut init, "pap.delta.fc2", cfg.hidden, 1);
    layers::init_linear(&mut ps, &mut init, "pap.score", cfg.input_dim, 1);
    ps
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: &Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap())
    }

    fn col(g: &Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn soft_position_limits() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::full(&[2, 5], 0.2));
        assert!(g.value(expected_index(&g, uniform)).data().iter().all(|&x| (x - 2.0).abs() < 1e-12));
        let mut one_hot = vec![0.0; 5];
        one_hot[3] = 1.0;
        let oh = g.constant(Tensor::from_vec(&[1, 5], one_hot).unwrap());
        assert_eq!(g.scalar(expected_index(&g, oh)), 3.0);
    }

    #[test]
    fn endpoint_examples() {
        let g = Graph::<f64>::new();
        let s = endpoint(&g, col(&g, &[3.0]), col(&g, &[0.5]), row(&g, &[1.0]), 10);
        assert_eq!(g.scalar(s), 3.5);
        let s = endpoint(&g, col(&g, &[12.7]), col(&g, &[0.0]), row(&g, &[1.0]), 10);
        assert_eq!(g.scalar(s), 10.0);
        let s = endpoint(&g, col(&g, &[1.0, 3.0]), col(&g, &[0.0, 0.0]), row(&g, &[0.25, 0.75]), 10);
        assert_eq!(g.scalar(s), 2.5);
        assert_eq!(endpoint_value(&[1.0, 3.0], &[0.0, 0.0], &[0.25, 0.75], 10), 2.5);
    }

    #[test]
    fn loss_examples() {
        for (d, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
            assert_eq!(pap_loss_value(d, 0.0, 1.0), want);
            let g = Graph::<f64>::new();
            assert_eq!(g.scalar(pap_loss(&g, g.scalar_const(d), 0.0, 1.0)), want);
        }
    }

    #[test]
    fn truncation_uses_ceiling() {
        let t = [5, 6, 7, 8, 9];
        assert_eq!(truncate_transcript(&t, 2.0), &[5, 6]);
        assert_eq!(truncate_transcript(&t, 1.667), &[5, 6]);
        assert!(truncate_transcript(&t, 0.0).is_empty());
        assert_eq!(truncate_transcript(&t, 5.0).len(), 5);
    }

    #[test]
    fn pointer_weights_are_a_distribution() {
        let cfg = PapConfig { input_dim: 6, attn_dim: 4, hidden: 5, max_window: 8, max_frames: 12, ..PapConfig::default() };
        let ps = init_params::<f64>(&cfg);
        let g = Graph::new();
        let p = Bound::new(&g, &ps, false);
        let mut init = Init::new(3);
        let a = g.constant(init.normal(&[7, 6], 1.0));
        let c = g.constant(init.normal(&[12, 6], 1.0));
        let out = pointer(&g, &p, &cfg, a, c).unwrap().values(&g);
        assert!((out.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.w.iter().all(|&w| w >= 0.0));
        assert!(out.s_hat >= 0.0 && out.s_hat <= 7.0);
        assert!((out.s_hat - endpoint_value(&out.p, &out.delta, &out.w, 7)).abs() < 1e-12);
        let empty = g.constant(Tensor::zeros(&[0, 6]));
        assert!(pointer(&g, &p, &cfg, empty, c).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn truncation_keeps_the_ceiling_prefix(t in prop::collection::vec(0u32..50, 0..40), s in -5.0f64..50.0) {
                let k = truncate_transcript(&t, s);
                let want = (s.max(0.0).ceil() as usize).min(t.len());
                prop_assert_eq!(k.len(), want);
                prop_assert_eq!(k, &t[..want]);
            }

            #[test]
            fn endpoint_stays_in_range(
                p in prop::collection::vec(0.0f64..10.0, 1..8),
                raw in prop::collection::vec(-1.0f64..1.0, 8),
                n in 1usize..12,
            ) {
                let m = p.len();
                let delta = &raw[..m];
                let w: Vec<f64> = vec![1.0 / m as f64; m];
                let e = endpoint_value(&p, delta, &w, n);
                prop_assert!(e.is_finite());
                let lo = p.iter().zip(delta).map(|(a, b)| a + b).fold(f64::INFINITY, f64::min).max(0.0).min(n as f64);
                let hi = p.iter().zip(delta).map(|(a, b)| a + b).fold(f64::NEG_INFINITY, f64::max).max(0.0).min(n as f64);
                prop_assert!(e >= lo - 1e-9 && e <= hi + 1e-9, "{} not in [{}, {}]", e, lo, hi);
            }
        }
    }
}
