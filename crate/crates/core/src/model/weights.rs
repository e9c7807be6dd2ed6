use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{seeded_init, InitScheme, Tensor2D};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// `[d_model × d_model]`; head `h` owns columns `h·d_head .. (h+1)·d_head`.
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    /// `[d_model × d_ff]`
    pub w_in: Tensor2D,
    /// `[d_ff × d_model]`
    pub w_out: Tensor2D,
    /// `[1 × d_model]` gains of the pre-attention and pre-MLP RMS norms.
    pub attn_norm: Tensor2D,
    pub mlp_norm: Tensor2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// `[vocab × d_model]`
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
    /// `[1 × d_model]`
    pub final_norm: Tensor2D,
    /// `[d_model × vocab]`
    pub unembedding: Tensor2D,
}

impl LayerWeights {
    fn params(&self) -> [&Tensor2D; 8] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.w_in,
            &self.w_out,
            &self.attn_norm,
            &self.mlp_norm,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor2D; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_in,
            &mut self.w_out,
            &mut self.attn_norm,
            &mut self.mlp_norm,
        ]
    }
}

pub const LAYER_PARAM_NAMES: [&str; 8] = [
    "wq", "wk", "wv", "wo", "w_in", "w_out", "attn_norm", "mlp_norm",
];

impl ModelWeights {
    /// Seeded initialisation: every matrix is `normal(0.02)` drawn from its
    /// own stream `derive_seed(seed, [canonical index])`; norm gains are 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut idx = 0u64;
        let mut normal = |rows, cols| {
            let t = seeded_init(
                rows,
                cols,
                InitScheme::Normal { std: INIT_STD },
                derive_seed(seed, &[idx]),
            );
            idx += 1;
            t
        };
        let ones = |n| Tensor2D::filled(1, n, 1.0);
        let d = config.d_model;
        let embedding = normal(config.vocab_size, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                wq: normal(d, d)?,
                wk: normal(d, d)?,
                wv: normal(d, d)?,
                wo: normal(d, d)?,
                w_in: normal(d, config.d_ff)?,
                w_out: normal(config.d_ff, d)?,
                attn_norm: ones(d),
                mlp_norm: ones(d),
            });
        }
        let unembedding = normal(d, config.vocab_size)?;
        Ok(Self {
            embedding,
            layers,
            final_norm: ones(d),
            unembedding,
        })
    }

    /// Same shapes as `config`, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let z = Tensor2D::zeros;
        Self {
            embedding: z(config.vocab_size, d),
            layers: (0..config.num_layers)
                .map(|_| LayerWeights {
                    wq: z(d, d),
                    wk: z(d, d),
                    wv: z(d, d),
                    wo: z(d, d),
                    w_in: z(d, config.d_ff),
                    w_out: z(config.d_ff, d),
                    attn_norm: z(1, d),
                    mlp_norm: z(1, d),
                })
                .collect(),
            final_norm: z(1, d),
            unembedding: z(d, config.vocab_size),
        }
    }

    /// All matrices in canonical order: embedding; per layer
    /// wq, wk, wv, wo, w_in, w_out, attn_norm, mlp_norm; final_norm;
    /// unembedding. Checkpoints and optimiser state use this order.
    pub fn params(&self) -> Vec<&Tensor2D> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend(layer.params());
        }
        out.push(&self.final_norm);
        out.push(&self.unembedding);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2D> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembedding);
        out
    }

    /// Human-readable names matching [`ModelWeights::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_PARAM_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.push("final_norm".into());
        out.push("unembedding".into());
        out
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros_like(config);
        if self.layers.len() != config.num_layers {
            return Err(Error::Config(format!(
                "{} layers of weights for a {}-layer config",
                self.layers.len(),
                config.num_layers
            )));
        }
        for ((name, have), want) in self
            .param_names()
            .iter()
            .zip(self.params())
            .zip(expected.params())
        {
            if have.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.params()
            .iter()
            .map(|p| p.sum_squares())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        if !weights.is_finite() {
            return Err(Error::Config("weights contain non-finite values".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }
}
