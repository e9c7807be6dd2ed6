//! Per-(layer, head) ALr aggregated over a corpus, and the raw
//! norm/attention table behind it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{alr, alr_curve};
use crate::error::{Error, Result};
use crate::kv_cache::CompressionConfig;
use crate::model::{decode_step, prefill, AttentionRecord, DecodeState, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlrOptions {
    /// Tokens per chunk; the first `chunk_len - 1` are encoded.
    pub chunk_len: usize,
    /// Number of trailing query steps whose ALr is averaged. 1 uses only the
    /// final query.
    pub query_steps: usize,
    pub corpus_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlrCell {
    pub layer: usize,
    pub head: usize,
    /// Mean over chunks.
    pub alr: f64,
    /// One value per chunk, in corpus order.
    pub per_chunk: Vec<f64>,
    /// Mean `Y^m` curve of the final query, `m = 1..=chunk_len - 1`.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlrReport {
    pub num_layers: usize,
    pub num_heads: usize,
    pub chunk_len: usize,
    pub num_chunks: usize,
    pub query_steps: usize,
    pub corpus_id: String,
    /// Layer-major.
    pub cells: Vec<AlrCell>,
}

impl AlrReport {
    pub fn cell(&self, layer: usize, head: usize) -> &AlrCell {
        &self.cells[layer * self.num_heads + head]
    }
}

/// Per-head `(alr averaged over query steps, final-step curve)` for one chunk.
fn chunk_alr(model: &Model, tokens: &[u32], query_steps: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let n = tokens.len();
    let steps = query_steps.clamp(1, n);
    let mut state = DecodeState::new(model, CompressionConfig::none())?;
    let mut records: Vec<AttentionRecord> = Vec::with_capacity(steps);
    for (i, &t) in tokens.iter().enumerate() {
        let (_, record) = decode_step(model, &mut state, t)?;
        if i + steps >= n {
            records.push(record);
        }
    }
    let last = records.last().expect("at least one query step");
    state
        .caches()
        .iter()
        .zip(&last.rows)
        .map(|(cache, final_row)| {
            let norms = cache.key_norms();
            let mut total = 0.0;
            for record in &records {
                let row = &record.rows[cache.layer() * model.config.num_heads + cache.head()];
                total += alr(&row.scores, &norms[..row.scores.len()])?;
            }
            let curve = alr_curve(&final_row.scores, &norms)?;
            Ok((total / records.len() as f64, curve))
        })
        .collect()
}

/// Encodes each chunk uncompressed and measures, for every head, how far
/// the key-norm drop order is from the attention-optimal one.
pub fn alr_heatmap(model: &Model, chunks: &[Vec<u32>], options: &AlrOptions) -> Result<AlrReport> {
    if options.chunk_len < 2 {
        return Err(Error::Task("chunks need at least 2 tokens".into()));
    }
    if chunks.is_empty() {
        return Err(Error::Empty("no chunks to analyse"));
    }
    if let Some(short) = chunks.iter().find(|c| c.len() < options.chunk_len) {
        return Err(Error::Task(format!(
            "chunk of {} tokens is shorter than chunk_len {}",
            short.len(),
            options.chunk_len
        )));
    }
    let per_chunk: Vec<Vec<(f64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|c| chunk_alr(model, &c[..options.chunk_len - 1], options.query_steps))
        .collect::<Result<_>>()?;

    let cfg = &model.config;
    let k = chunks.len() as f64;
    let cells = (0..cfg.num_layers * cfg.num_heads)
        .map(|idx| {
            let values: Vec<f64> = per_chunk.iter().map(|c| c[idx].0).collect();
            let mut curve = vec![0.0; options.chunk_len - 1];
            for c in &per_chunk {
                curve.iter_mut().zip(&c[idx].1).for_each(|(a, b)| *a += b);
            }
            curve.iter_mut().for_each(|v| *v /= k);
            AlrCell {
                layer: idx / cfg.num_heads,
                head: idx % cfg.num_heads,
                alr: values.iter().sum::<f64>() / k,
                per_chunk: values,
                curve,
            }
        })
        .collect();
    Ok(AlrReport {
        num_layers: cfg.num_layers,
        num_heads: cfg.num_heads,
        chunk_len: options.chunk_len,
        num_chunks: chunks.len(),
        query_steps: options.query_steps.max(1),
        corpus_id: options.corpus_id.clone(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub token_id: u32,
    pub attention_score: f32,
    pub key_norm: f32,
    pub key: Vec<f32>,
}

/// One row per cached position per head, with the final token's attention
/// and the cached key norms.
pub fn norm_attention_dump(model: &Model, tokens: &[u32]) -> Result<Vec<DumpRow>> {
    if tokens.len() < 2 {
        return Err(Error::Empty("dump needs at least two tokens"));
    }
    let state = prefill(model, tokens, CompressionConfig::none())?;
    let record = state.last_record().expect("prefill ran");
    let mut rows = Vec::new();
    for (cache, row) in state.caches().iter().zip(&record.rows) {
        for (entry, &score) in cache.entries().iter().zip(&row.scores) {
            rows.push(DumpRow {
                layer: cache.layer(),
                head: cache.head(),
                position: entry.position(),
                token_id: entry.token_id(),
                attention_score: score,
                key_norm: entry.key_norm(),
                key: entry.key().to_vec(),
            });
        }
    }
    Ok(rows)
}
