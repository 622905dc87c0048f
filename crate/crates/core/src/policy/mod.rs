//! Tiny multi-exit decoder-only policy.
//!
//! One parameter set holds a shared backbone of `n_layers` pre-norm blocks and
//! an untied output head per exit depth. The member at exit depth `k` runs the
//! first `k` blocks and head `k`; deeper members reuse the same tensors.

mod checkpoint;
mod model;
mod params;
mod sampling;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{BoundParams, Hidden};
pub use params::{ParamGrads, PolicyParams};
pub use sampling::{sample_from_logits, Trajectory};

use serde::{Deserialize, Serialize};

use crate::numerics::NumericsError;
use crate::tasks::{Token, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Sorted exit depths; the last one must equal `n_layers`.
    pub exit_depths: Vec<usize>,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            context_len: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            exit_depths: vec![1, 4],
            init_scale: 0.02,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::InvalidConfig(m));
        if self.vocab_size < VOCAB_SIZE {
            return bad(format!("vocab_size must be at least {VOCAB_SIZE}"));
        }
        if self.context_len < 2 || self.d_model == 0 || self.n_layers == 0 {
            return bad("context_len >= 2, d_model >= 1 and n_layers >= 1 required".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.exit_depths.is_empty()
            || self.exit_depths.windows(2).any(|w| w[0] >= w[1])
            || self.exit_depths[0] == 0
            || *self.exit_depths.last().unwrap() != self.n_layers
        {
            return bad(format!(
                "exit_depths {:?} must be strictly increasing within 1..={} and end at n_layers",
                self.exit_depths, self.n_layers
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad("init_scale must be positive".into());
        }
        Ok(())
    }

    pub fn deepest_exit(&self) -> usize {
        self.n_layers
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }

    pub fn exit_index(&self, depth: usize) -> Result<usize, PolicyError> {
        self.exit_depths
            .iter()
            .position(|&d| d == depth)
            .ok_or(PolicyError::UnknownExit(depth))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("exit depth {0} has no output head")]
    UnknownExit(usize),
    #[error("token {0} out of vocabulary")]
    TokenOutOfVocab(Token),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
