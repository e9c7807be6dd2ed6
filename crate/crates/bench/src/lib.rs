//! Shared fixtures for the benchmarks.

use kvnorm_core::kv_cache::LayerHeadCache;
use kvnorm_core::rng::SplitMix64;
use kvnorm_core::{Model, ModelConfig, Tensor2D};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    let mut rng = SplitMix64::new(seed);
    let data = (0..rows * cols).map(|_| rng.next_normal() as f32).collect();
    Tensor2D::from_vec(rows, cols, data).expect("finite by construction")
}

/// A cache of `n` random keys and values of width `d_head`.
pub fn random_cache(n: usize, d_head: usize, layer: usize, seed: u64) -> LayerHeadCache {
    let mut rng = SplitMix64::new(seed);
    let mut cache = LayerHeadCache::new(layer, 0);
    for p in 0..n {
        let key = (0..d_head).map(|_| rng.next_normal() as f32).collect();
        let value = (0..d_head).map(|_| rng.next_normal() as f32).collect();
        cache
            .append(key, value, p, (p % 256) as u32)
            .expect("positions increase");
    }
    cache
}

pub fn reference_model(seed: u64) -> Model {
    Model::init(ModelConfig::reference(), seed).expect("reference config is valid")
}
