//! Step-by-step comparison of the attention each policy would lose.
//!
//! A run is driven by the attention-score oracle. At every step and every
//! compressed head, the same cache and the same attention row are handed to
//! each other policy, which picks as many entries as it would evict, and
//! the attention loss of both choices is recorded. Comparing on identical
//! caches keeps the evicted counts equal, which separate runs would not.

use serde::{Deserialize, Serialize};

use super::loss::attention_loss;
use crate::error::{Error, Result};
use crate::kv_cache::{select_count, select_evictions, CompressionConfig, LayerHeadCache, PassContext, Policy};
use crate::model::{decode_step, DecodeState, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub policy: Policy,
    pub evicted: usize,
    pub oracle_loss: f64,
    pub policy_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossAudit {
    pub rows: Vec<AuditRow>,
}

impl LossAudit {
    /// Rows where the oracle lost strictly more attention than the policy.
    pub fn violations(&self) -> impl Iterator<Item = &AuditRow> {
        self.rows.iter().filter(|r| r.oracle_loss > r.policy_loss)
    }
}

fn indices_of(cache: &LayerHeadCache, positions: &[usize]) -> Result<Vec<usize>> {
    positions
        .iter()
        .map(|&p| cache.index_of(p).ok_or(Error::MissingPosition(p)))
        .collect()
}

/// Decodes `tokens` under `oracle` (which must use the oracle policy) and
/// audits every pass against `others`.
pub fn policy_loss_audit(model: &Model, tokens: &[u32], oracle: &CompressionConfig, others: &[Policy]) -> Result<LossAudit> {
    if oracle.policy != Policy::OracleAttention {
        return Err(Error::Compression(format!(
            "audit runs must use the oracle policy, got {}",
            oracle.policy
        )));
    }
    let mut state = DecodeState::new(model, oracle.clone())?;
    state.set_deferred_eviction(true);
    let mut rows = Vec::new();
    for &t in tokens {
        let (_, record) = decode_step(model, &mut state, t)?;
        for (cache, row) in state.caches().iter().zip(&record.rows) {
            if oracle.skip_layers.contains(&cache.layer()) {
                continue;
            }
            let ctx = PassContext {
                step: record.step,
                tokens_seen: state.position(),
                scores: Some(&row.scores),
            };
            let oracle_pick = select_evictions(cache, oracle, &ctx)?;
            for &policy in others {
                let (theirs, ours) = if policy == Policy::FastgenLite {
                    let cfg = CompressionConfig {
                        policy,
                        ..oracle.clone()
                    };
                    let theirs = select_evictions(cache, &cfg, &ctx)?;
                    // The rule-based policy ignores recency protection, so it
                    // is compared with the unrestricted minimum.
                    let ours = select_count(cache, Policy::OracleAttention, theirs.len(), 0, 0, &ctx)?;
                    (theirs, ours)
                } else {
                    let theirs = select_count(cache, policy, oracle_pick.len(), oracle.protect_recent, oracle.seed, &ctx)?;
                    (theirs, oracle_pick.clone())
                };
                if theirs.is_empty() {
                    continue;
                }
                rows.push(AuditRow {
                    step: record.step,
                    layer: cache.layer(),
                    head: cache.head(),
                    policy,
                    evicted: theirs.len(),
                    oracle_loss: attention_loss(&row.scores, &indices_of(cache, &ours)?)?,
                    policy_loss: attention_loss(&row.scores, &indices_of(cache, &theirs)?)?,
                });
            }
        }
        state.evict_now()?;
    }
    Ok(LossAudit { rows })
}
