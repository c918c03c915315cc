//! Rotary position encoding with a shared physical timeline for video and
//! audio tokens.
//!
//! Audio runs at four times the video latent rate, so audio angles use a base
//! frequency scaled by 1/4: audio index `4τ` and video index `τ` rotate by the
//! same angle. Each chunk's new frames start at 0, motion frames sit at
//! `−K…−1` and the sink window sits immediately before the motion window.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::RotaryTable;
use crate::error::{Error, Result};
use crate::latent::Modality;
use crate::scalar::Real;
use crate::tokens::{Role, TokenMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub video_scale: f64,
    pub audio_scale: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self { base: 10_000.0, video_scale: 1.0, audio_scale: 0.25 }
    }
}

impl RopeConfig {
    pub fn scale(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Video => self.video_scale,
            Modality::Audio => self.audio_scale,
        }
    }

    /// `index · scale(modality) · base^(−2·pair/head_dim)`.
    pub fn angle(&self, index: i64, pair: usize, head_dim: usize, modality: Modality) -> f64 {
        debug_assert!(pair < head_dim / 2);
        let freq = self.base.powf(-2.0 * pair as f64 / head_dim as f64);
        (index as f64 * self.scale(modality)) * freq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionAssignment {
    pub temporal_index: i64,
    pub modality: Modality,
    pub base_frequency_scale: f64,
}

/// Default sink placement: directly before a `K`-frame motion window.
pub fn default_sink_offset(motion_frames: usize, sink_len: usize) -> i64 {
    -((motion_frames + sink_len) as i64)
}

/// Assigns temporal indices by role.
///
/// Noisy tokens take their frame index (audio on the 4×-dense audio timeline),
/// motion tokens `frame − K`, sink tokens `sink_offset + frame`; reference and
/// text tokens are atemporal at index 0 and told apart by their role.
pub fn assign_positions(
    cfg: &RopeConfig,
    tokens: &[TokenMeta],
    motion_frames: usize,
    sink_offset: i64,
) -> Result<Vec<PositionAssignment>> {
    let k = motion_frames as i64;
    let sink_len = tokens
        .iter()
        .filter(|t| t.role == Role::Sink)
        .map(|t| t.frame as i64 + 1)
        .max()
        .unwrap_or(0);
    if sink_len > 0 {
        let (lo, hi) = (sink_offset, sink_offset + sink_len - 1);
        let motion_overlap = k > 0 && hi >= -k && lo <= -1;
        if motion_overlap || hi >= 0 {
            return Err(Error::Precondition(format!(
                "sink window [{lo}, {hi}] overlaps motion window [-{k}, -1] or the chunk timeline"
            )));
        }
    }
    tokens
        .iter()
        .map(|t| {
            let idx = match t.role {
                Role::NoisyVideo | Role::NoisyAudio | Role::History | Role::CondTail => t.frame as i64,
                Role::Motion => {
                    if t.frame as i64 >= k {
                        return Err(Error::Precondition(format!("motion frame {} ≥ K = {k}", t.frame)));
                    }
                    t.frame as i64 - k
                }
                Role::Sink => sink_offset + t.frame as i64,
                Role::Reference | Role::Text => 0,
            };
            Ok(PositionAssignment {
                temporal_index: idx,
                modality: t.modality,
                base_frequency_scale: cfg.scale(t.modality),
            })
        })
        .collect()
}

/// Cos/sin table for a sequence of positions.
pub fn rotary_table<T: Real>(cfg: &RopeConfig, positions: &[PositionAssignment], head_dim: usize) -> Rc<RotaryTable<T>> {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for p in positions {
        for pair in 0..half {
            let a = cfg.angle(p.temporal_index, pair, head_dim, p.modality);
            cos.push(T::lit(a.cos()));
            sin.push(T::lit(a.sin()));
        }
    }
    Rc::new(RotaryTable { cos, sin, half })
}

/// Plain sequence positions `0..n` on the video-rate timeline (causal LM use).
pub fn sequence_table<T: Real>(cfg: &RopeConfig, n: usize, head_dim: usize) -> Rc<RotaryTable<T>> {
    let positions: Vec<_> = (0..n as i64)
        .map(|i| PositionAssignment { temporal_index: i, modality: Modality::Video, base_frequency_scale: 1.0 })
        .collect();
    rotary_table(cfg, &positions, head_dim)
}
