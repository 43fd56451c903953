use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level vocabulary: 256 byte tokens plus end-of-sequence.
pub const BYTE_VOCAB_SIZE: usize = 257;
pub const EOS_TOKEN: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Total positions the KV cache can hold (prompt plus generated tokens).
    pub max_context: usize,
    pub rope_theta: f64,
}

impl ModelConfig {
    /// Four-layer, 128-wide byte-level model used throughout the tests.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 256,
            vocab_size: BYTE_VOCAB_SIZE,
            max_context: 512,
            rope_theta: 10_000.0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail(format!("zero-sized dimension in {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_head().is_multiple_of(2) {
            return fail(format!("rotary embedding needs an even head width, got {}", self.d_head()));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.max_context < 2 {
            return fail(format!("max_context {} < 2", self.max_context));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return fail(format!("rope_theta {} must be positive", self.rope_theta));
        }
        Ok(())
    }

    /// Quantized matrices in storage order, with their `(rows, cols)` shapes.
    ///
    /// Matrices are `[out x in]`, so groups run along the input dimension.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![("tok_embeddings".to_string(), v, d)];
        for l in 0..self.n_layers {
            for (name, rows, cols) in [
                ("attn.wq", d, d),
                ("attn.wk", d, d),
                ("attn.wv", d, d),
                ("attn.wo", d, d),
                ("mlp.w_gate", f, d),
                ("mlp.w_up", f, d),
                ("mlp.w_down", d, f),
            ] {
                out.push((format!("layers.{l}.{name}"), rows, cols));
            }
        }
        out.push(("lm_head".to_string(), v, d));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Index of a layer tensor inside [`ModelConfig::tensor_shapes`].
#[derive(Debug, Clone, Copy)]
pub(crate) enum LayerTensor {
    Wq = 0,
    Wk,
    Wv,
    Wo,
    Gate,
    Up,
    Down,
}

pub(crate) const TENSORS_PER_LAYER: usize = 7;

pub(crate) fn layer_tensor_index(layer: usize, t: LayerTensor) -> usize {
    1 + layer * TENSORS_PER_LAYER + t as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.d_head(), 32);
        assert_eq!(c.tensor_shapes().len(), 2 + 4 * 7);
        assert_eq!(c.tensor_shapes()[layer_tensor_index(2, LayerTensor::Down)].0, "layers.2.mlp.w_down");
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.max_context = 1;
        assert!(c.validate().is_err());
    }
}
