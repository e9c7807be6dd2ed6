//! Zeroing a few dimensions of one cached key and measuring how much the
//! later attention rows move.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::CompressionConfig;
use crate::model::{decode_step, prefill, DecodeState, HeadAttention, Model};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// The largest-magnitude dimensions of the target key.
    PeakDims,
    /// Seeded uniformly random dimensions.
    RandomDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub layer: usize,
    pub head: usize,
    pub k_dims: usize,
    pub mode: ProbeMode,
    pub seed: u64,
    /// Trailing tokens decoded after the perturbation.
    pub probe_steps: usize,
    /// Position to perturb; defaults to the lowest-norm cached key.
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub mode: ProbeMode,
    pub layer: usize,
    pub head: usize,
    pub target_position: usize,
    pub k_dims: usize,
    /// Sorted ascending.
    pub zeroed_dims: Vec<usize>,
    /// Mean absolute change of the probed head's attention entries.
    pub attention_delta: f64,
    pub baseline: Vec<HeadAttention>,
    pub perturbed: Vec<HeadAttention>,
}

/// The `k` largest-magnitude indices of `key`, lower index first on ties.
pub fn peak_dims(key: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].abs().total_cmp(&key[a].abs()).then(a.cmp(&b)));
    let mut dims = order[..k.min(key.len())].to_vec();
    dims.sort_unstable();
    dims
}

/// `k` distinct indices below `n`, uniformly chosen by seed.
pub fn random_dims(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        pool.swap(i, j);
    }
    let mut dims = pool[..k].to_vec();
    dims.sort_unstable();
    dims
}

fn run(model: &Model, mut state: DecodeState, tokens: &[u32], layer: usize, head: usize) -> Result<Vec<HeadAttention>> {
    tokens
        .iter()
        .map(|&t| Ok(decode_step(model, &mut state, t)?.1.row(layer, head).clone()))
        .collect()
}

pub fn dim_zero_probe(model: &Model, tokens: &[u32], options: &ProbeOptions) -> Result<ProbeResult> {
    let cfg = &model.config;
    if tokens.len() < 2 {
        return Err(Error::Empty("probe needs at least two tokens"));
    }
    if options.layer >= cfg.num_layers || options.head >= cfg.num_heads {
        return Err(Error::Config(format!(
            "layer {} / head {} out of range",
            options.layer, options.head
        )));
    }
    if options.k_dims > cfg.d_head {
        return Err(Error::Config(format!(
            "k_dims {} exceeds d_head {}",
            options.k_dims, cfg.d_head
        )));
    }
    let steps = options.probe_steps.clamp(1, tokens.len() - 1);
    let split = tokens.len() - steps;
    let state = prefill(model, &tokens[..split], CompressionConfig::none())?;
    let cache = state.cache(options.layer, options.head);
    let target = match options.target {
        Some(p) => p,
        None => {
            let entries = cache.entries();
            let best = (0..entries.len())
                .min_by(|&a, &b| entries[a].key_norm().total_cmp(&entries[b].key_norm()).then(a.cmp(&b)))
                .expect("prefill cached at least one entry");
            entries[best].position()
        }
    };
    let idx = cache.index_of(target).ok_or(Error::MissingPosition(target))?;
    let dims = match options.mode {
        ProbeMode::PeakDims => peak_dims(cache.entries()[idx].key(), options.k_dims),
        ProbeMode::RandomDims => random_dims(
            cfg.d_head,
            options.k_dims,
            derive_seed(options.seed, &[options.layer as u64, options.head as u64]),
        ),
    };
    let mut perturbed_state = state.clone();
    perturbed_state
        .cache_mut(options.layer, options.head)
        .zero_key_dims(target, &dims)?;

    let rest = &tokens[split..];
    let baseline = run(model, state, rest, options.layer, options.head)?;
    let perturbed = run(model, perturbed_state, rest, options.layer, options.head)?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (b, p) in baseline.iter().zip(&perturbed) {
        for (x, y) in b.scores.iter().zip(&p.scores) {
            sum += (*x as f64 - *y as f64).abs();
            count += 1;
        }
    }
    Ok(ProbeResult {
        mode: options.mode,
        layer: options.layer,
        head: options.head,
        target_position: target,
        k_dims: options.k_dims,
        zeroed_dims: dims,
        attention_delta: sum / count as f64,
        baseline,
        perturbed,
    })
}
