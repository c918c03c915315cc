//! Token roles and per-token metadata shared by the denoiser and orchestrator.

use serde::{Deserialize, Serialize};

use crate::latent::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Reference,
    Motion,
    Sink,
    NoisyVideo,
    NoisyAudio,
    Text,
    History,
    CondTail,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::Reference,
        Role::Motion,
        Role::Sink,
        Role::NoisyVideo,
        Role::NoisyAudio,
        Role::Text,
        Role::History,
        Role::CondTail,
    ];

    /// Clean conditioning tokens of the denoiser sequence.
    pub fn is_condition(self) -> bool {
        matches!(self, Role::Reference | Role::Motion | Role::Sink | Role::Text)
    }

    pub fn is_noisy(self) -> bool {
        matches!(self, Role::NoisyVideo | Role::NoisyAudio)
    }

    pub fn id(self) -> usize {
        Role::ALL.iter().position(|&r| r == self).unwrap()
    }
}

/// One token of a packed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub role: Role,
    pub modality: Modality,
    /// Frame index inside the token's own block (0-based).
    pub frame: usize,
    /// Spatial cell for video tokens, 0 otherwise.
    pub cell: usize,
    /// Set for tokens that carry clean-state (t = 0) embeddings.
    pub clean: bool,
}

impl TokenMeta {
    pub fn new(role: Role, modality: Modality, frame: usize, cell: usize) -> Self {
        Self { role, modality, frame, cell, clean: role.is_condition() }
    }
}

pub type TokenStream = Vec<TokenMeta>;

/// Token metadata for `frames × cells` tokens of one block.
pub fn block_tokens(role: Role, modality: Modality, frames: usize, cells: usize) -> TokenStream {
    (0..frames)
        .flat_map(|f| (0..cells).map(move |c| TokenMeta::new(role, modality, f, c)))
        .collect()
}
