use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    None,
    /// Keep the lowest-norm keys; evict the highest.
    KeepLowL2,
    /// Keep the highest-norm keys; evict the lowest.
    KeepHighL2,
    Random,
    /// Evict the entries the most recent query attended to least.
    OracleAttention,
    /// Keep special tokens, punctuation and a recent window.
    FastgenLite,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::None,
        Policy::KeepLowL2,
        Policy::KeepHighL2,
        Policy::Random,
        Policy::OracleAttention,
        Policy::FastgenLite,
    ];

    /// Policies whose retained count is set by a budget.
    pub fn is_budgeted(self) -> bool {
        matches!(
            self,
            Policy::KeepLowL2 | Policy::KeepHighL2 | Policy::Random | Policy::OracleAttention
        )
    }

    /// Short name used on the command line and in CSV output.
    pub fn cli_name(self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::KeepLowL2 => "l2-low",
            Policy::KeepHighL2 => "l2-high",
            Policy::Random => "random",
            Policy::OracleAttention => "oracle",
            Policy::FastgenLite => "fastgen",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Policy::None,
            "l2-low" | "keep_low_l2" => Policy::KeepLowL2,
            "l2-high" | "keep_high_l2" => Policy::KeepHighL2,
            "random" => Policy::Random,
            "oracle" | "oracle_attention" => Policy::OracleAttention,
            "fastgen" | "fastgen_lite" => Policy::FastgenLite,
            other => return Err(Error::Compression(format!("unknown policy {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Fixed number of retained entries per (layer, head).
    Tokens(usize),
    /// Fraction of all tokens seen so far to discard. The retained budget at
    /// each pass is `ceil((1 - ratio) × tokens_seen)`.
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadBudget {
    pub layer: usize,
    pub head: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionConfig {
    pub policy: Policy,
    pub budget: Option<Budget>,
    pub skip_layers: BTreeSet<usize>,
    pub protect_recent: usize,
    /// Recent window for `fastgen_lite` when no budget is given.
    pub local_window: usize,
    pub special_token_ids: BTreeSet<u32>,
    pub punctuation_token_ids: BTreeSet<u32>,
    pub seed: u64,
    /// When false, prefill runs uncompressed and a single eviction pass runs
    /// at its end; decoding always evicts.
    pub evict_during_prefill: bool,
    /// Per-(layer, head) token budgets that override `budget`.
    pub head_budgets: Vec<HeadBudget>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            policy: Policy::None,
            budget: None,
            skip_layers: [0, 1].into_iter().collect(),
            protect_recent: 1,
            local_window: 0,
            special_token_ids: BTreeSet::new(),
            punctuation_token_ids: BTreeSet::new(),
            seed: 0,
            evict_during_prefill: true,
            head_budgets: Vec::new(),
        }
    }
}

impl CompressionConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: Policy, budget: Option<Budget>) -> Self {
        Self {
            policy,
            budget,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.policy, self.budget) {
            (Policy::None, Some(_)) => {
                return Err(Error::Compression(
                    "policy none takes neither a budget nor a ratio".into(),
                ))
            }
            (p, None) if p.is_budgeted() && self.head_budgets.is_empty() => {
                return Err(Error::Compression(format!(
                    "policy {p} needs a budget or a ratio"
                )))
            }
            _ => {}
        }
        match self.budget {
            Some(Budget::Ratio(r)) if !(0.0..1.0).contains(&r) => {
                return Err(Error::Compression(format!("ratio {r} outside [0, 1)")))
            }
            Some(Budget::Tokens(b)) if self.policy.is_budgeted() && b < self.protect_recent => {
                return Err(Error::BudgetBelowProtected {
                    budget: b,
                    protect: self.protect_recent,
                })
            }
            _ => {}
        }
        if let Some(hb) = self
            .head_budgets
            .iter()
            .find(|hb| hb.tokens < self.protect_recent)
        {
            return Err(Error::BudgetBelowProtected {
                budget: hb.tokens,
                protect: self.protect_recent,
            });
        }
        Ok(())
    }

    pub fn is_noop(&self) -> bool {
        self.policy == Policy::None
    }

    /// Retained-entry budget for one (layer, head) after `tokens_seen`
    /// tokens, or `None` when no budget applies.
    pub fn budget_for(&self, layer: usize, head: usize, tokens_seen: usize) -> Option<usize> {
        if let Some(hb) = self
            .head_budgets
            .iter()
            .find(|hb| hb.layer == layer && hb.head == head)
        {
            return Some(hb.tokens);
        }
        match self.budget? {
            Budget::Tokens(b) => Some(b),
            Budget::Ratio(r) => {
                // The small offset keeps e.g. (1 - 0.9) × 10 from rounding up to 2.
                let keep = ((1.0 - r) * tokens_seen as f64 - 1e-9).ceil().max(0.0) as usize;
                Some(keep.max(self.protect_recent))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.cli_name().parse::<Policy>().unwrap(), p);
        }
        assert!("bogus".parse::<Policy>().is_err());
    }

    #[test]
    fn validation_rules() {
        assert!(CompressionConfig::none().validate().is_ok());
        let conflict = CompressionConfig::with_policy(Policy::None, Some(Budget::Ratio(0.5)));
        assert!(conflict.validate().is_err());
        assert!(CompressionConfig::with_policy(Policy::KeepLowL2, None)
            .validate()
            .is_err());
        assert!(
            CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Ratio(1.0)))
                .validate()
                .is_err()
        );
        let mut c = CompressionConfig::with_policy(Policy::Random, Some(Budget::Tokens(2)));
        c.protect_recent = 3;
        assert!(matches!(
            c.validate(),
            Err(Error::BudgetBelowProtected { budget: 2, protect: 3 })
        ));
        assert!(CompressionConfig::with_policy(Policy::FastgenLite, None)
            .validate()
            .is_ok());
    }

    #[test]
    fn ratio_budget_conversion() {
        let c = CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Ratio(0.9)));
        assert_eq!(c.budget_for(2, 0, 10), Some(1));
        assert_eq!(c.budget_for(2, 0, 100), Some(10));
        assert_eq!(c.budget_for(2, 0, 101), Some(11));
        let c = CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Ratio(0.0)));
        assert_eq!(c.budget_for(2, 0, 37), Some(37));
        let c = CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Ratio(0.5)));
        assert_eq!(c.budget_for(2, 0, 7), Some(4));
    }

    #[test]
    fn head_overrides_take_precedence() {
        let mut c = CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Tokens(8)));
        c.head_budgets.push(HeadBudget { layer: 3, head: 1, tokens: 2 });
        assert_eq!(c.budget_for(3, 1, 100), Some(2));
        assert_eq!(c.budget_for(3, 0, 100), Some(8));
    }

    #[test]
    fn default_skips_first_two_layers() {
        let c = CompressionConfig::default();
        assert_eq!(c.skip_layers.iter().copied().collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(c.protect_recent, 1);
    }
}
