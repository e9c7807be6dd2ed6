use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub use_rope: bool,
    pub norm_eps: f32,
}

impl ModelConfig {
    /// The 4-layer reference model used for the retrieval experiments.
    pub fn reference() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            d_model: 128,
            d_head: 32,
            d_ff: 512,
            vocab_size: crate::workloads::VOCAB_SIZE,
            max_seq_len: 512,
            use_rope: true,
            norm_eps: 1e-5,
        }
    }

    /// A small model for tests and quick smoke runs.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ff: 32,
            vocab_size: crate::workloads::VOCAB_SIZE,
            max_seq_len: 128,
            use_rope: true,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model != self.num_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != num_heads {} * d_head {}",
                self.d_model, self.num_heads, self.d_head
            )));
        }
        if self.use_rope && self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding needs an even d_head, got {}",
                self.d_head
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be a small positive number".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 2 * d;
        2 * self.vocab_size * d + self.num_layers * per_layer + d
    }
}

/// Bytes needed to hold an uncompressed KV cache of `n` positions:
/// `L × H × n × d_head × 2 × precision_bytes`.
pub fn kv_memory_bytes(config: &ModelConfig, n: usize, precision_bytes: usize) -> usize {
    kv_memory_bytes_raw(config.num_layers, config.num_heads, n, config.d_head, precision_bytes)
}

pub fn kv_memory_bytes_raw(
    layers: usize,
    heads: usize,
    n: usize,
    d_head: usize,
    precision_bytes: usize,
) -> usize {
    layers * heads * n * d_head * 2 * precision_bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::reference().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut c = ModelConfig::tiny();
        c.d_model = 17;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.d_head = 3;
        c.num_heads = 1;
        c.d_model = 3;
        assert!(c.validate().is_err());
        c.use_rope = false;
        assert!(c.validate().is_ok());
        let mut c = ModelConfig::tiny();
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_memory_formula() {
        assert_eq!(kv_memory_bytes_raw(32, 32, 0, 128, 2), 0);
        assert_eq!(kv_memory_bytes_raw(32, 32, 4096, 128, 2), 2_147_483_648);
        let c = ModelConfig::reference();
        assert_eq!(kv_memory_bytes(&c, 200, 4), 2 * kv_memory_bytes(&c, 100, 4));
    }
}
