//! Building blocks shared by the denoiser, the orchestrator and the pointer.

use std::rc::Rc;

use crate::autodiff::{Graph, RotaryTable, Var};
use crate::params::{Bound, Init, ParameterSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// `x·W + b`.
pub fn linear<T: Real>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, p.get(&format!("{name}.w")));
    match p.try_get(&format!("{name}.b")) {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// RMS norm followed by a learned per-channel gain.
pub fn norm<T: Real>(g: &Graph<T>, p: &Bound, name: &str, x: Var) -> Var {
    g.mul_row(g.rms_norm(x), p.get(name))
}

pub fn init_linear<T: Real>(ps: &mut ParameterSet<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{name}.w"), init.linear(fan_in, fan_out));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

pub fn init_zero_linear<T: Real>(ps: &mut ParameterSet<T>, name: &str, fan_in: usize, fan_out: usize) {
    ps.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
    ps.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

pub fn init_gain<T: Real>(ps: &mut ParameterSet<T>, name: &str, dim: usize) {
    ps.insert(name, Tensor::full(&[1, dim], T::one()));
}

/// Scaled dot-product attention over `heads` heads of width `head_dim`.
///
/// `q` is `n × D`, `k` and `v` are `m × D`; `mask` is row-major `n × m`.
pub fn multi_head<T: Real>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
    mask: Option<&[bool]>,
) -> Var {
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (
                g.slice_cols(q, h * head_dim, head_dim),
                g.slice_cols(k, h * head_dim, head_dim),
                g.slice_cols(v, h * head_dim, head_dim),
            );
            let logits = g.scale(g.matmul_nt(qh, kh), scale);
            g.matmul(g.softmax(logits, mask), vh)
        })
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Pre-norm self-attention sublayer; returns the residual branch only.
#[allow(clippy::too_many_arguments)]
pub fn self_attention<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    h: Var,
    rot: Option<&Rc<RotaryTable<T>>>,
    mask: Option<&[bool]>,
    heads: usize,
    head_dim: usize,
) -> Var {
    let x = norm(g, p, &format!("{prefix}.norm1"), h);
    let mut q = g.matmul(x, p.get(&format!("{prefix}.wq")));
    let mut k = g.matmul(x, p.get(&format!("{prefix}.wk")));
    let v = g.matmul(x, p.get(&format!("{prefix}.wv")));
    if let Some(r) = rot {
        q = g.rotary(q, Rc::clone(r));
        k = g.rotary(k, Rc::clone(r));
    }
    let a = multi_head(g, q, k, v, heads, head_dim, mask);
    g.matmul(a, p.get(&format!("{prefix}.wo")))
}

/// Two-layer SiLU feed-forward `W2·silu(W1·x + b1) + b2`.
pub fn ffn<T: Real>(g: &Graph<T>, p: &Bound, prefix: &str, x: Var) -> Var {
    let hidden = g.silu(linear(g, p, &format!("{prefix}.fc1"), x));
    linear(g, p, &format!("{prefix}.fc2"), hidden)
}

pub fn init_ffn<T: Real>(ps: &mut ParameterSet<T>, init: &mut Init, prefix: &str, dim: usize, hidden: usize, zero_out: bool) {
    init_linear(ps, init, &format!("{prefix}.fc1"), dim, hidden);
    if zero_out {
        init_zero_linear(ps, &format!("{prefix}.fc2"), hidden, dim);
    } else {
        init_linear(ps, init, &format!("{prefix}.fc2"), hidden, dim);
    }
}

/// Parameters of a pre-norm attention sublayer.
pub fn init_attention<T: Real>(ps: &mut ParameterSet<T>, init: &mut Init, prefix: &str, dim: usize, zero_out: bool) {
    init_gain(ps, &format!("{prefix}.norm1"), dim);
    for m in ["wq", "wk", "wv"] {
        ps.insert(format!("{prefix}.{m}"), init.linear(dim, dim));
    }
    let wo = if zero_out { Tensor::zeros(&[dim, dim]) } else { init.linear(dim, dim) };
    ps.insert(format!("{prefix}.wo"), wo);
}

/// A full pre-norm transformer block with a dense FFN.
#[allow(clippy::too_many_arguments)]
pub fn dense_block<T: Real>(
    g: &Graph<T>,
    p: &Bound,
    prefix: &str,
    h: Var,
    rot: Option<&Rc<RotaryTable<T>>>,
    mask: Option<&[bool]>,
    heads: usize,
    head_dim: usize,
) -> Var {
    let a = self_attention(g, p, prefix, h, rot, mask, heads, head_dim);
    let h = g.add(h, a);
    let x = norm(g, p, &format!("{prefix}.norm2"), h);
    g.add(h, ffn(g, p, &format!("{prefix}.ffn"), x))
}

pub fn init_dense_block<T: Real>(
    ps: &mut ParameterSet<T>,
    init: &mut Init,
    prefix: &str,
    dim: usize,
    hidden: usize,
    zero_out: bool,
) {
    init_attention(ps, init, prefix, dim, zero_out);
    init_gain(ps, &format!("{prefix}.norm2"), dim);
    init_ffn(ps, init, &format!("{prefix}.ffn"), dim, hidden, zero_out);
}

/// Sinusoidal features of a diffusion time `t ∈ [0, 1]`, shape `1 × dim`.
pub fn timestep_features<T: Real>(t: T, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let t = t.as_f64() * 1000.0;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::lit((t * freq).cos());
        out[i + half] = T::lit((t * freq).sin());
    }
    Tensor::from_vec(&[1, dim], out).unwrap()
}

/// Timestep MLP: sinusoidal features → SiLU MLP → `1 × dim` embedding.
pub fn timestep_embedding<T: Real>(g: &Graph<T>, p: &Bound, prefix: &str, t: T, dim: usize) -> Var {
    let f = g.constant(timestep_features(t, dim));
    let h = g.silu(linear(g, p, &format!("{prefix}.fc1"), f));
    linear(g, p, &format!("{prefix}.fc2"), h)
}

/// Row indices `0..n` as a shared index list.
pub fn rows(idx: impl IntoIterator<Item = usize>) -> Rc<Vec<usize>> {
    Rc::new(idx.into_iter().collect())
}
