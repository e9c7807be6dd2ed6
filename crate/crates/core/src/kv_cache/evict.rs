use serde::{Deserialize, Serialize};

use super::config::{CompressionConfig, Policy};
use super::LayerHeadCache;
use crate::error::{shape_err, Error, Result};
use crate::rng::{derive_seed, SplitMix64};

/// What an eviction pass knows beyond the cache itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct PassContext<'a> {
    /// Position of the token whose step triggered this pass.
    pub step: usize,
    /// Tokens consumed so far, including the current one.
    pub tokens_seen: usize,
    /// Attention row of the most recent query over the current entries, in
    /// storage order. Required by the oracle policy.
    pub scores: Option<&'a [f32]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionOutcome {
    /// Sorted ascending.
    pub evicted_positions: Vec<usize>,
    pub retained_count: usize,
}

impl EvictionOutcome {
    fn noop(cache: &LayerHeadCache) -> Self {
        Self {
            evicted_positions: Vec::new(),
            retained_count: cache.len(),
        }
    }
}

/// One row of the optional eviction audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionAudit {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub policy: Policy,
    pub pre_occupancy: usize,
    pub post_occupancy: usize,
    pub evicted_positions: Vec<usize>,
}

/// Chooses the positions a pass would evict without touching the cache.
pub fn select_evictions(
    cache: &LayerHeadCache,
    config: &CompressionConfig,
    ctx: &PassContext<'_>,
) -> Result<Vec<usize>> {
    if config.policy == Policy::None || config.skip_layers.contains(&cache.layer()) {
        return Ok(Vec::new());
    }
    let budget = config.budget_for(cache.layer(), cache.head(), ctx.tokens_seen);
    if config.policy == Policy::FastgenLite {
        let window = budget.unwrap_or(config.local_window);
        return Ok(fastgen_selection(cache, config, window));
    }
    let budget = budget.ok_or_else(|| {
        Error::Compression(format!("policy {} needs a budget", config.policy))
    })?;
    if budget < config.protect_recent {
        return Err(Error::BudgetBelowProtected {
            budget,
            protect: config.protect_recent,
        });
    }
    let excess = cache.len().saturating_sub(budget);
    select_count(cache, config.policy, excess, config.protect_recent, config.seed, ctx)
}

/// Picks exactly `m` positions under a budgeted policy, never touching the
/// newest `protect_recent` entries. Ties evict the earlier position.
pub fn select_count(
    cache: &LayerHeadCache,
    policy: Policy,
    m: usize,
    protect_recent: usize,
    seed: u64,
    ctx: &PassContext<'_>,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let n_candidates = cache.len().saturating_sub(protect_recent);
    if m > n_candidates {
        return Err(Error::Compression(format!(
            "cannot evict {m} of {n_candidates} unprotected entries"
        )));
    }
    let entries = cache.entries();
    let mut order: Vec<usize> = (0..n_candidates).collect();
    // Storage order is position order, so a stable sort on the key alone
    // breaks ties toward the earlier position.
    match policy {
        Policy::KeepLowL2 => order.sort_by(|&a, &b| {
            entries[b].key_norm().total_cmp(&entries[a].key_norm())
        }),
        Policy::KeepHighL2 => order.sort_by(|&a, &b| {
            entries[a].key_norm().total_cmp(&entries[b].key_norm())
        }),
        Policy::OracleAttention => {
            let scores = ctx
                .scores
                .ok_or_else(|| Error::Compression("oracle policy needs attention scores".into()))?;
            if scores.len() != cache.len() {
                return Err(shape_err(
                    "oracle eviction",
                    format!("{} scores for {} entries", scores.len(), cache.len()),
                ));
            }
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        }
        Policy::Random => {
            let mut rng = SplitMix64::new(derive_seed(
                seed,
                &[cache.layer() as u64, cache.head() as u64, ctx.step as u64],
            ));
            for i in 0..m {
                let j = i + rng.below(n_candidates - i);
                order.swap(i, j);
            }
        }
        Policy::None | Policy::FastgenLite => {
            return Err(Error::Compression(format!(
                "policy {policy} does not select by count"
            )))
        }
    }
    let mut positions: Vec<usize> = order[..m].iter().map(|&i| entries[i].position()).collect();
    positions.sort_unstable();
    Ok(positions)
}

fn fastgen_selection(cache: &LayerHeadCache, config: &CompressionConfig, window: usize) -> Vec<usize> {
    let n = cache.len();
    let recent_start = n.saturating_sub(window);
    cache
        .entries()
        .iter()
        .enumerate()
        .filter(|(i, e)| {
            *i < recent_start
                && !config.special_token_ids.contains(&e.token_id())
                && !config.punctuation_token_ids.contains(&e.token_id())
        })
        .map(|(_, e)| e.position())
        .collect()
}

fn apply(cache: &mut LayerHeadCache, evicted: Vec<usize>) -> EvictionOutcome {
    cache.remove_positions(&evicted);
    EvictionOutcome {
        evicted_positions: evicted,
        retained_count: cache.len(),
    }
}

/// Runs one eviction pass of `config.policy` over `cache`.
pub fn evict(
    cache: &mut LayerHeadCache,
    config: &CompressionConfig,
    ctx: &PassContext<'_>,
) -> Result<EvictionOutcome> {
    let evicted = select_evictions(cache, config, ctx)?;
    if evicted.is_empty() {
        return Ok(EvictionOutcome::noop(cache));
    }
    Ok(apply(cache, evicted))
}

/// Evicts the `m` entries with the smallest attention scores (ties evict the
/// earlier position). `scores` are aligned with the cache's storage order.
pub fn oracle_evict(cache: &mut LayerHeadCache, scores: &[f32], m: usize) -> Result<EvictionOutcome> {
    if scores.len() != cache.len() {
        return Err(shape_err(
            "oracle_evict",
            format!("{} scores for {} entries", scores.len(), cache.len()),
        ));
    }
    if m > cache.len() {
        return Err(shape_err(
            "oracle_evict",
            format!("cannot evict {m} of {} entries", cache.len()),
        ));
    }
    let ctx = PassContext {
        scores: Some(scores),
        ..PassContext::default()
    };
    let evicted = select_count(cache, Policy::OracleAttention, m, 0, 0, &ctx)?;
    Ok(apply(cache, evicted))
}

/// Keeps special tokens, punctuation and the `config.local_window` most
/// recent entries; evicts everything else.
pub fn fastgen_lite_evict(cache: &mut LayerHeadCache, config: &CompressionConfig) -> EvictionOutcome {
    let evicted = fastgen_selection(cache, config, config.local_window);
    apply(cache, evicted)
}

/// `1 − post/pre`.
pub fn compression_ratio(pre_occupancy: usize, post_occupancy: usize) -> Result<f64> {
    if pre_occupancy == 0 {
        return Err(Error::Empty("compression ratio of an empty cache"));
    }
    if post_occupancy > pre_occupancy {
        return Err(Error::Compression(format!(
            "post occupancy {post_occupancy} exceeds pre occupancy {pre_occupancy}"
        )));
    }
    Ok(1.0 - post_occupancy as f64 / pre_occupancy as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::Budget;
    use crate::workloads::tokenizer::{BOS, PUNCT_IDS};
    use proptest::prelude::*;

    fn cache_with_norms(layer: usize, norms: &[f32]) -> LayerHeadCache {
        let mut c = LayerHeadCache::new(layer, 0);
        for (p, &n) in norms.iter().enumerate() {
            c.append(vec![n, 0.0], vec![p as f32, 0.0], p, p as u32).unwrap();
        }
        c
    }

    fn budgeted(policy: Policy, budget: usize, protect: usize) -> CompressionConfig {
        CompressionConfig {
            protect_recent: protect,
            skip_layers: Default::default(),
            ..CompressionConfig::with_policy(policy, Some(Budget::Tokens(budget)))
        }
    }

    #[test]
    fn keep_low_evicts_highest_norm() {
        let mut c = cache_with_norms(2, &[0.5, 2.0, 1.0]);
        let out = evict(&mut c, &budgeted(Policy::KeepLowL2, 2, 0), &PassContext::default()).unwrap();
        assert_eq!(out.evicted_positions, vec![1]);
        assert_eq!(out.retained_count, 2);
    }

    #[test]
    fn keep_high_evicts_lowest_norm() {
        let mut c = cache_with_norms(2, &[0.5, 2.0, 1.0]);
        let out = evict(&mut c, &budgeted(Policy::KeepHighL2, 2, 0), &PassContext::default()).unwrap();
        assert_eq!(out.evicted_positions, vec![0]);
    }

    #[test]
    fn at_budget_is_noop() {
        let mut c = cache_with_norms(2, &[0.5, 2.0, 1.0]);
        let out = evict(&mut c, &budgeted(Policy::KeepLowL2, 3, 0), &PassContext::default()).unwrap();
        assert!(out.evicted_positions.is_empty());
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn ties_evict_earlier_position() {
        let mut c = cache_with_norms(2, &[1.0, 1.0, 1.0, 1.0]);
        let out = evict(&mut c, &budgeted(Policy::KeepLowL2, 2, 0), &PassContext::default()).unwrap();
        assert_eq!(out.evicted_positions, vec![0, 1]);
        let mut c = cache_with_norms(2, &[1.0, 1.0, 1.0, 1.0]);
        let out = evict(&mut c, &budgeted(Policy::KeepHighL2, 3, 0), &PassContext::default()).unwrap();
        assert_eq!(out.evicted_positions, vec![0]);
    }

    #[test]
    fn protected_entries_survive() {
        let mut c = cache_with_norms(2, &[0.1, 0.2, 9.0]);
        let out = evict(&mut c, &budgeted(Policy::KeepLowL2, 2, 1), &PassContext::default()).unwrap();
        assert_eq!(out.evicted_positions, vec![1]);
        assert_eq!(c.positions(), vec![0, 2]);
    }

    #[test]
    fn skipped_layer_untouched() {
        let mut c = cache_with_norms(0, &[0.5, 2.0, 1.0]);
        let before = c.clone();
        let mut config = budgeted(Policy::KeepLowL2, 1, 0);
        config.skip_layers.insert(0);
        let out = evict(&mut c, &config, &PassContext::default()).unwrap();
        assert!(out.evicted_positions.is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn oracle_cases() {
        let mut c = cache_with_norms(2, &[1.0, 1.0, 1.0, 1.0]);
        let out = oracle_evict(&mut c, &[0.1, 0.2, 0.3, 0.4], 2).unwrap();
        assert_eq!(out.evicted_positions, vec![0, 1]);
        let mut c = cache_with_norms(2, &[1.0, 1.0]);
        assert!(oracle_evict(&mut c, &[0.5, 0.5], 0).unwrap().evicted_positions.is_empty());
        assert!(oracle_evict(&mut c, &[1.0], 1).is_err());
    }

    #[test]
    fn oracle_policy_needs_scores() {
        let mut c = cache_with_norms(2, &[1.0, 2.0, 3.0]);
        let config = budgeted(Policy::OracleAttention, 1, 0);
        assert!(evict(&mut c, &config, &PassContext::default()).is_err());
        let scores = [0.7, 0.1, 0.2];
        let ctx = PassContext { scores: Some(&scores), ..Default::default() };
        let out = evict(&mut c, &config, &ctx).unwrap();
        assert_eq!(out.evicted_positions, vec![1, 2]);
    }

    #[test]
    fn fastgen_rules() {
        // [BOS, a, COMMA, b, c]
        let tokens = [BOS, b'a' as u32, b',' as u32, b'b' as u32, b'c' as u32];
        let mut c = LayerHeadCache::new(3, 0);
        for (p, &t) in tokens.iter().enumerate() {
            c.append(vec![1.0], vec![1.0], p, t).unwrap();
        }
        let mut config = CompressionConfig::with_policy(Policy::FastgenLite, None);
        config.local_window = 1;
        config.special_token_ids.insert(BOS);
        config.punctuation_token_ids.insert(b',' as u32);
        let mut c1 = c.clone();
        let out = fastgen_lite_evict(&mut c1, &config);
        assert_eq!(c1.positions(), vec![0, 2, 4]);
        assert_eq!(out.evicted_positions, vec![1, 3]);

        config.local_window = 5;
        let mut c2 = c.clone();
        assert!(fastgen_lite_evict(&mut c2, &config).evicted_positions.is_empty());

        let mut bare = CompressionConfig::with_policy(Policy::FastgenLite, None);
        bare.local_window = 0;
        let mut c3 = c.clone();
        fastgen_lite_evict(&mut c3, &bare);
        assert!(c3.is_empty());

        let mut with_punct = bare.clone();
        with_punct.punctuation_token_ids = PUNCT_IDS.iter().copied().collect();
        let mut c4 = c;
        fastgen_lite_evict(&mut c4, &with_punct);
        assert_eq!(c4.positions(), vec![2]);
    }

    #[test]
    fn fastgen_ratio_zero_is_noop() {
        let mut c = cache_with_norms(3, &[1.0; 6]);
        let config = CompressionConfig {
            skip_layers: Default::default(),
            ..CompressionConfig::with_policy(Policy::FastgenLite, Some(Budget::Ratio(0.0)))
        };
        let ctx = PassContext { tokens_seen: 6, ..Default::default() };
        assert!(evict(&mut c, &config, &ctx).unwrap().evicted_positions.is_empty());
    }

    #[test]
    fn random_is_seeded_and_sized() {
        let norms: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let config = CompressionConfig {
            seed: 99,
            ..budgeted(Policy::Random, 8, 1)
        };
        let ctx = PassContext { step: 19, tokens_seen: 20, scores: None };
        let mut a = cache_with_norms(2, &norms);
        let mut b = cache_with_norms(2, &norms);
        let oa = evict(&mut a, &config, &ctx).unwrap();
        let ob = evict(&mut b, &config, &ctx).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(oa.evicted_positions.len(), 12);
        assert!(!oa.evicted_positions.contains(&19));
        let other = PassContext { step: 20, ..ctx };
        let mut c = cache_with_norms(2, &norms);
        assert_ne!(evict(&mut c, &config, &other).unwrap(), oa);
    }

    #[test]
    fn compression_ratio_cases() {
        assert_eq!(compression_ratio(100, 50).unwrap(), 0.5);
        assert_eq!(compression_ratio(100, 100).unwrap(), 0.0);
        assert!((compression_ratio(1000, 100).unwrap() - 0.9).abs() < 1e-12);
        assert!(compression_ratio(0, 0).is_err());
        assert!(compression_ratio(3, 4).is_err());
    }

    proptest! {
        #[test]
        fn budgeted_occupancy_and_norm_order(
            norms in proptest::collection::vec(0.0f32..4.0, 1..40),
            budget in 1usize..40,
            protect in 0usize..3,
        ) {
            prop_assume!(protect <= budget);
            let mut c = cache_with_norms(2, &norms);
            let before = c.clone();
            let out = evict(&mut c, &budgeted(Policy::KeepLowL2, budget, protect), &PassContext::default()).unwrap();
            prop_assert_eq!(c.len(), norms.len().min(budget));
            prop_assert_eq!(out.evicted_positions.len() + out.retained_count, norms.len());

            let protected_from = norms.len().saturating_sub(protect);
            let retained_max = c.entries().iter()
                .filter(|e| e.position() < protected_from)
                .map(|e| e.key_norm())
                .fold(f32::NEG_INFINITY, f32::max);
            for &p in &out.evicted_positions {
                let e = &before.entries()[before.index_of(p).unwrap()];
                prop_assert!(e.key_norm() >= retained_max);
                // Tie-break: a retained entry with the same norm must be later.
                for r in c.entries().iter().filter(|r| r.position() < protected_from) {
                    if r.key_norm() == e.key_norm() {
                        prop_assert!(r.position() > p);
                    }
                }
            }
        }
    }
}
