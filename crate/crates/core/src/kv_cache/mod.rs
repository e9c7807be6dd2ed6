//! Per-(layer, head) KV storage and budgeted eviction.

mod config;
mod evict;

pub use config::{Budget, CompressionConfig, HeadBudget, Policy};
pub use evict::{
    compression_ratio, evict, fastgen_lite_evict, oracle_evict, select_count, select_evictions,
    EvictionAudit, EvictionOutcome, PassContext,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::l2_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    key: Vec<f32>,
    value: Vec<f32>,
    key_norm: f32,
    position: usize,
    token_id: u32,
}

impl CacheEntry {
    pub fn key(&self) -> &[f32] {
        &self.key
    }

    pub fn value(&self) -> &[f32] {
        &self.value
    }

    pub fn key_norm(&self) -> f32 {
        self.key_norm
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn token_id(&self) -> u32 {
        self.token_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeadCache {
    layer: usize,
    head: usize,
    entries: Vec<CacheEntry>,
}

impl LayerHeadCache {
    pub fn new(layer: usize, head: usize) -> Self {
        Self {
            layer,
            head,
            entries: Vec::new(),
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn key_norms(&self) -> Vec<f32> {
        self.entries.iter().map(|e| e.key_norm).collect()
    }

    /// Appends an entry, caching the key's L2 norm. Positions must strictly
    /// increase.
    pub fn append(&mut self, key: Vec<f32>, value: Vec<f32>, position: usize, token_id: u32) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if position <= last.position {
                return Err(Error::NonMonotonicPosition {
                    position,
                    last: last.position,
                });
            }
        }
        if key.len() != value.len() {
            return Err(crate::error::shape_err(
                "append",
                format!("key has {} dims, value has {}", key.len(), value.len()),
            ));
        }
        let key_norm = l2_norm(&key);
        self.entries.push(CacheEntry {
            key,
            value,
            key_norm,
            position,
            token_id,
        });
        Ok(())
    }

    pub fn index_of(&self, position: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&position, |e| e.position)
            .ok()
    }

    /// Removes the given positions (which must be sorted ascending).
    pub(crate) fn remove_positions(&mut self, sorted_positions: &[usize]) {
        if sorted_positions.is_empty() {
            return;
        }
        let mut drop = sorted_positions.iter().peekable();
        self.entries.retain(|e| {
            if drop.peek() == Some(&&e.position) {
                drop.next();
                false
            } else {
                true
            }
        });
    }

    /// Zeroes the listed key dimensions of the entry at `position` and
    /// refreshes its cached norm.
    pub fn zero_key_dims(&mut self, position: usize, dims: &[usize]) -> Result<()> {
        let idx = self
            .index_of(position)
            .ok_or(Error::MissingPosition(position))?;
        let entry = &mut self.entries[idx];
        for &d in dims {
            if d >= entry.key.len() {
                return Err(crate::error::shape_err(
                    "zero_key_dims",
                    format!("dimension {d} out of range for width {}", entry.key.len()),
                ));
            }
            entry.key[d] = 0.0;
        }
        entry.key_norm = l2_norm(&entry.key);
        Ok(())
    }
}
