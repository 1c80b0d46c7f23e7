//! Teacher (Restormer) and surrogate (Mamba-style RSSB) blocks.
//!
//! Both kinds map `(n, c, h, w)` to `(n, c, h, w)`, so any stage can be
//! swapped for any other of the same width.

mod mamba;
mod restormer;
mod stage;

use serde::{Deserialize, Serialize};

pub use mamba::{MambaBlock, ScanOrder};
pub use restormer::RestormerBlock;
pub use stage::{Block, BlockKind, Stage, StageVariant, VariantKind};

/// Hyperparameters shared by every block in a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    /// Attention heads in MDTA; must divide every stage width.
    pub heads: usize,
    /// Hidden width multiplier of the gated feed-forward network.
    pub ffn_expansion: f64,
    /// Inner width multiplier of the state-space branch.
    pub ssm_expansion: usize,
    /// State dimension per channel of the selective scan.
    pub d_state: usize,
    /// Rank of the step-size projection; `None` means `ceil(c / 16)`.
    pub dt_rank: Option<usize>,
    /// Step size the scan starts from before any training.
    pub dt_init: f64,
    pub ln_eps: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            heads: 1,
            ffn_expansion: 2.0,
            ssm_expansion: 2,
            d_state: 8,
            dt_rank: None,
            dt_init: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::EnsError::config(m.to_string()));
        if self.heads == 0 {
            return bad("heads must be >= 1");
        }
        if !(self.ffn_expansion > 0.0) {
            return bad("ffn_expansion must be > 0");
        }
        if self.ssm_expansion == 0 || self.d_state == 0 || self.dt_rank == Some(0) {
            return bad("ssm_expansion, d_state and dt_rank must be >= 1");
        }
        if !(self.dt_init > 0.0) || !(self.ln_eps > 0.0) {
            return bad("dt_init and ln_eps must be > 0");
        }
        Ok(())
    }

    pub(crate) fn ffn_hidden(&self, channels: usize) -> usize {
        ((channels as f64 * self.ffn_expansion).round() as usize).max(1)
    }

    pub(crate) fn dt_rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| channels.div_ceil(16))
    }
}
