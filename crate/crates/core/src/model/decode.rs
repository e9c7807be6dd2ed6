//! Cached autoregressive decoding with per-step eviction.

use serde::{Deserialize, Serialize};

use super::attention::attend;
use super::layers::{gelu, rms_norm_into};
use super::rope::rotate_row;
use super::weights::Model;
use crate::error::{Error, Result};
use crate::kv_cache::{evict, CompressionConfig, EvictionAudit, LayerHeadCache, PassContext};
use crate::tensor::{gemm_into, Tensor2D, Transpose};

/// Attention of one query over one (layer, head) cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    /// Cached positions, aligned with `scores`.
    pub positions: Vec<usize>,
    pub scores: Vec<f32>,
    /// The (rotated) query that produced `scores`.
    pub query: Vec<f32>,
}

/// All heads' attention rows for one decode step, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub num_heads: usize,
    pub rows: Vec<HeadAttention>,
}

impl AttentionRecord {
    pub fn row(&self, layer: usize, head: usize) -> &HeadAttention {
        &self.rows[layer * self.num_heads + head]
    }
}

#[derive(Debug, Clone)]
pub struct DecodeState {
    caches: Vec<LayerHeadCache>,
    num_heads: usize,
    position: usize,
    compression: CompressionConfig,
    evicting: bool,
    last_record: Option<AttentionRecord>,
    last_logits: Option<Vec<f32>>,
    audit: Option<Vec<EvictionAudit>>,
}

impl DecodeState {
    pub fn new(model: &Model, compression: CompressionConfig) -> Result<Self> {
        compression.validate()?;
        let cfg = &model.config;
        let caches = (0..cfg.num_layers)
            .flat_map(|l| (0..cfg.num_heads).map(move |h| LayerHeadCache::new(l, h)))
            .collect();
        Ok(Self {
            caches,
            num_heads: cfg.num_heads,
            position: 0,
            compression,
            evicting: true,
            last_record: None,
            last_logits: None,
            audit: None,
        })
    }

    /// Tokens consumed since the state was created.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn compression(&self) -> &CompressionConfig {
        &self.compression
    }

    pub fn cache(&self, layer: usize, head: usize) -> &LayerHeadCache {
        &self.caches[layer * self.num_heads + head]
    }

    pub fn cache_mut(&mut self, layer: usize, head: usize) -> &mut LayerHeadCache {
        &mut self.caches[layer * self.num_heads + head]
    }

    pub fn caches(&self) -> &[LayerHeadCache] {
        &self.caches
    }

    pub fn last_record(&self) -> Option<&AttentionRecord> {
        self.last_record.as_ref()
    }

    pub fn last_logits(&self) -> Option<&[f32]> {
        self.last_logits.as_deref()
    }

    /// Starts recording every eviction pass that removes at least one entry.
    pub fn enable_audit(&mut self) {
        self.audit.get_or_insert_with(Vec::new);
    }

    pub fn take_audit(&mut self) -> Vec<EvictionAudit> {
        self.audit.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn total_occupancy(&self) -> usize {
        self.caches.iter().map(LayerHeadCache::len).sum()
    }

    /// When deferred, [`decode_step`] leaves the caches untouched and the
    /// caller triggers the pass with [`DecodeState::evict_now`].
    pub fn set_deferred_eviction(&mut self, deferred: bool) {
        self.evicting = !deferred;
    }

    /// Runs one eviction pass driven by the most recent attention record.
    pub fn evict_now(&mut self) -> Result<()> {
        let Some(record) = self.last_record.take() else {
            return Ok(());
        };
        let result = self.run_eviction(&record, self.position);
        self.last_record = Some(record);
        result
    }

    fn run_eviction(&mut self, record: &AttentionRecord, tokens_seen: usize) -> Result<()> {
        if self.compression.is_noop() {
            return Ok(());
        }
        for (cache, row) in self.caches.iter_mut().zip(&record.rows) {
            let pre = cache.len();
            let ctx = PassContext {
                step: record.step,
                tokens_seen,
                scores: Some(&row.scores),
            };
            let outcome = evict(cache, &self.compression, &ctx)?;
            if let Some(audit) = self.audit.as_mut() {
                if !outcome.evicted_positions.is_empty() {
                    audit.push(EvictionAudit {
                        step: record.step,
                        layer: cache.layer(),
                        head: cache.head(),
                        policy: self.compression.policy,
                        pre_occupancy: pre,
                        post_occupancy: outcome.retained_count,
                        evicted_positions: outcome.evicted_positions,
                    });
                }
            }
        }
        Ok(())
    }
}

fn row_times(x: &[f32], w: &Tensor2D, out: &mut Tensor2D) -> Result<()> {
    // x is borrowed as a 1×n matrix without copying into a Tensor2D.
    let xt = Tensor2D::row_vector(x);
    gemm_into(1.0, &xt, Transpose::No, w, Transpose::No, 0.0, out)
}

/// Runs one token through the model against the cached state.
///
/// The new key/value pair is appended before attention, every head attends
/// over its full current cache, and only then does eviction run.
pub fn decode_step(model: &Model, state: &mut DecodeState, token: u32) -> Result<(Vec<f32>, AttentionRecord)> {
    let cfg = &model.config;
    if state.position >= cfg.max_seq_len {
        return Err(Error::Capacity { max: cfg.max_seq_len });
    }
    if token as usize >= cfg.vocab_size {
        return Err(Error::TokenOutOfVocab {
            token,
            vocab: cfg.vocab_size,
        });
    }
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let pos = state.position;
    let w = &model.weights;

    let mut x = w.embedding.row(token as usize).to_vec();
    let mut h = vec![0.0f32; d];
    let mut q = Tensor2D::zeros(1, d);
    let mut k = Tensor2D::zeros(1, d);
    let mut v = Tensor2D::zeros(1, d);
    let mut proj = Tensor2D::zeros(1, d);
    let mut up = Tensor2D::zeros(1, cfg.d_ff);
    let mut rows = Vec::with_capacity(cfg.num_layers * cfg.num_heads);

    for (l, lw) in w.layers.iter().enumerate() {
        rms_norm_into(&x, lw.attn_norm.data(), cfg.norm_eps, &mut h);
        row_times(&h, &lw.wq, &mut q)?;
        row_times(&h, &lw.wk, &mut k)?;
        row_times(&h, &lw.wv, &mut v)?;
        let mut concat = vec![0.0f32; d];
        for head in 0..cfg.num_heads {
            let span = head * dh..(head + 1) * dh;
            let mut qh = q.data()[span.clone()].to_vec();
            let mut kh = k.data()[span.clone()].to_vec();
            if cfg.use_rope {
                rotate_row(&mut qh, pos, false);
                rotate_row(&mut kh, pos, false);
            }
            let cache = &mut state.caches[l * cfg.num_heads + head];
            cache.append(kh, v.data()[span.clone()].to_vec(), pos, token)?;
            let entries = cache.entries();
            let (out, scores) = attend(&qh, entries.len(), |i| entries[i].key(), |i| entries[i].value());
            concat[span].copy_from_slice(&out);
            rows.push(HeadAttention {
                layer: l,
                head,
                positions: cache.positions(),
                scores,
                query: qh,
            });
        }
        row_times(&concat, &lw.wo, &mut proj)?;
        x.iter_mut().zip(proj.data()).for_each(|(a, b)| *a += b);

        rms_norm_into(&x, lw.mlp_norm.data(), cfg.norm_eps, &mut h);
        row_times(&h, &lw.w_in, &mut up)?;
        up.data_mut().iter_mut().for_each(|u| *u = gelu(*u));
        row_times(up.data(), &lw.w_out, &mut proj)?;
        x.iter_mut().zip(proj.data()).for_each(|(a, b)| *a += b);
    }

    rms_norm_into(&x, w.final_norm.data(), cfg.norm_eps, &mut h);
    let mut logits = Tensor2D::zeros(1, cfg.vocab_size);
    row_times(&h, &w.unembedding, &mut logits)?;
    let logits = logits.into_data();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "decode_step" });
    }

    let record = AttentionRecord {
        step: pos,
        num_heads: cfg.num_heads,
        rows,
    };
    if state.evicting {
        state.run_eviction(&record, pos + 1)?;
    }
    state.position += 1;
    state.last_record = Some(record.clone());
    state.last_logits = Some(logits.clone());
    Ok((logits, record))
}

/// Encodes a prompt into a fresh cache. With `evict_during_prefill` set,
/// eviction runs after every position exactly as during decoding; otherwise
/// the prompt is encoded in full and a single pass runs at the end.
pub fn prefill(model: &Model, tokens: &[u32], compression: CompressionConfig) -> Result<DecodeState> {
    let mut state = DecodeState::new(model, compression)?;
    prefill_into(model, &mut state, tokens)?;
    Ok(state)
}

/// [`prefill`] into an existing (typically fresh, audit-enabled) state.
pub fn prefill_into(model: &Model, state: &mut DecodeState, tokens: &[u32]) -> Result<()> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Empty("prefill needs at least one token"));
    }
    if state.position + tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: state.position + tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    let streaming = state.compression.evict_during_prefill;
    let restore = state.evicting;
    state.evicting = restore && streaming;
    let result = tokens
        .iter()
        .try_for_each(|&t| decode_step(model, state, t).map(drop));
    state.evicting = restore;
    result?;
    if restore && !streaming {
        state.evict_now()?;
    }
    Ok(())
}

/// Greedy argmax with ties going to the lowest token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Prefills `prompt` then greedily generates `n` tokens.
pub fn greedy_generate(
    model: &Model,
    prompt: &[u32],
    n: usize,
    compression: CompressionConfig,
) -> Result<Vec<u32>> {
    let mut state = prefill(model, prompt, compression)?;
    let mut out = Vec::with_capacity(n);
    let mut logits = state.last_logits().expect("prefill ran").to_vec();
    for i in 0..n {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < n {
            logits = decode_step(model, &mut state, next)?.0;
        }
    }
    Ok(out)
}
