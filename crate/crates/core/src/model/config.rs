use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};

/// Number of trailing layers edited when no explicit list is given.
pub const DEFAULT_EDITABLE_TAIL: usize = 6;

/// Shape and seed of a toy decoder-only transformer.
///
/// `d_ff` is the width of the first MLP block's activation, which is also the
/// input width of the editable second MLP matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Empty means "the last six layers, or all of them when there are fewer".
    #[serde(default)]
    pub editable_layers: Vec<usize>,
    pub seed: u64,
    /// Floating-point width in bits. Only 64 is supported.
    #[serde(default = "default_precision")]
    pub precision: u32,
}

fn default_precision() -> u32 {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 256,
            n_heads: 4,
            max_seq_len: 8,
            editable_layers: Vec::new(),
            seed: 7,
            precision: 64,
        }
    }
}

impl ModelConfig {
    /// Checks every invariant and fills in the default editable layers.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let bad = |m: String| Err(EditError::Config(m));
        if !(2..=8).contains(&self.n_layers) {
            return bad(format!("n_layers must be in 2..=8, got {}", self.n_layers));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return bad("d_model and d_ff must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model % n_heads == 0 violated ({} % {})",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 || self.vocab_size > 512 {
            return bad(format!("vocab_size must be in 2..=512, got {}", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return bad(format!("max_seq_len must be >= 2, got {}", self.max_seq_len));
        }
        if self.precision != 64 {
            return bad(format!("precision {} unsupported; only 64-bit", self.precision));
        }
        let mut out = self.clone();
        if out.editable_layers.is_empty() {
            let start = self.n_layers.saturating_sub(DEFAULT_EDITABLE_TAIL);
            out.editable_layers = (start..self.n_layers).collect();
        }
        for w in out.editable_layers.windows(2) {
            if w[0] >= w[1] {
                return bad("editable_layers must be strictly increasing".into());
            }
        }
        if let Some(&l) = out.editable_layers.iter().find(|&&l| l >= self.n_layers) {
            return bad(format!("editable layer {l} >= n_layers {}", self.n_layers));
        }
        Ok(out)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
