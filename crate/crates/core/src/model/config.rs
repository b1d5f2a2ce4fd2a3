use saap_autodiff::{Activation, NormKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::json_hash;

/// Widths of one decoder layer. These diverge from the nominal
/// `n_heads`/`d_mlp` once a layer has been structurally pruned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidths {
    pub n_heads: usize,
    pub d_mlp: usize,
}

/// Shape of a pre-norm decoder-only transformer with a gated MLP and
/// learned absolute position embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm: NormKind,
    pub activation: Activation,
    pub tie_embeddings: bool,
    pub layers: Vec<LayerWidths>,
}

pub const NORM_EPS: f64 = 1e-6;

impl ModelConfig {
    /// Uniform config with byte vocabulary, RMS norm, SiLU, untied head.
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, d_mlp: usize) -> Self {
        let d_head = if n_heads == 0 { 0 } else { d_model / n_heads };
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            d_head,
            d_mlp,
            vocab_size: 256,
            max_seq_len: 128,
            norm: NormKind::Rms,
            activation: Activation::Silu,
            tie_embeddings: false,
            layers: vec![LayerWidths { n_heads, d_mlp }; n_layers],
        }
    }

    /// The ~1M parameter model used for end-to-end runs.
    pub fn desk() -> Self {
        ModelConfig::new(128, 6, 4, 256)
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.max_seq_len = max_seq_len;
        self
    }

    pub fn layer(&self, l: usize) -> LayerWidths {
        self.layers[l]
    }

    /// Only the head arithmetic, which is all group discovery relies on.
    pub fn check_head_dims(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 || self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.layers.len() != self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layer widths for {} layers",
                self.layers.len(),
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_head_dims()?;
        if self.d_mlp < 4 {
            return Err(Error::InvalidConfig(format!("d_mlp {} < 4", self.d_mlp)));
        }
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig(format!("n_layers {} < 2", self.n_layers)));
        }
        if self.vocab_size == 0 || self.max_seq_len < 2 {
            return Err(Error::InvalidConfig(
                "vocab_size must be positive and max_seq_len at least 2".into(),
            ));
        }
        for (l, w) in self.layers.iter().enumerate() {
            if w.n_heads == 0 || w.d_mlp == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} has {} heads and {} mlp channels",
                    w.n_heads, w.d_mlp
                )));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_arithmetic() {
        let c = ModelConfig::new(64, 2, 4, 16);
        assert_eq!(c.d_head, 16);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_invalid_shapes() {
        let mut c = ModelConfig::new(64, 2, 4, 16);
        c.d_head = 15;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(64, 1, 4, 16).validate().is_err());
        assert!(ModelConfig::new(64, 2, 4, 3).validate().is_err());
    }
}
