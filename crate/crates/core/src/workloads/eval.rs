//! Retrieval accuracy and language-model perplexity under compression.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tasks::RetrievalSample;
use crate::error::{Error, Result};
use crate::kv_cache::{Budget, CompressionConfig, Policy};
use crate::model::{argmax, cross_entropy, decode_step, greedy_generate, DecodeState, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub policy: Policy,
    pub ratio: Option<f64>,
    pub budget: Option<usize>,
    pub skip_layers: BTreeSet<usize>,
    pub accuracy: f64,
    /// Language-model runs only.
    pub perplexity: Option<f64>,
    pub next_token_accuracy: Option<f64>,
    pub num_samples: usize,
}

impl EvalResult {
    fn new(compression: &CompressionConfig, accuracy: f64, num_samples: usize) -> Self {
        let (ratio, budget) = match compression.budget {
            Some(Budget::Ratio(r)) => (Some(r), None),
            Some(Budget::Tokens(b)) => (None, Some(b)),
            None => (None, None),
        };
        Self {
            policy: compression.policy,
            ratio,
            budget,
            skip_layers: compression.skip_layers.clone(),
            accuracy,
            perplexity: None,
            next_token_accuracy: None,
            num_samples,
        }
    }
}

/// Greedy generation of the answer after each prompt, scored by exact match.
pub fn retrieval_outcomes(model: &Model, samples: &[RetrievalSample], compression: &CompressionConfig) -> Result<Vec<bool>> {
    compression.validate()?;
    samples
        .par_iter()
        .map(|s| {
            if s.tokens.len() + s.passkey_tokens.len() > model.config.max_seq_len + 1 {
                return Err(Error::SequenceTooLong {
                    len: s.tokens.len() + s.passkey_tokens.len() - 1,
                    max: model.config.max_seq_len,
                });
            }
            let out = greedy_generate(model, &s.tokens, s.passkey_tokens.len(), compression.clone())?;
            Ok(s.is_correct(&out))
        })
        .collect()
}

pub fn eval_retrieval(model: &Model, samples: &[RetrievalSample], compression: &CompressionConfig) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Empty("retrieval evaluation needs at least one sample"));
    }
    let hits = retrieval_outcomes(model, samples, compression)?;
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(EvalResult::new(compression, correct as f64 / samples.len() as f64, samples.len()))
}

/// Teacher-forced logits for one chunk: entry `i` holds the logits after
/// consuming `chunk[..=i]` and the target `chunk[i + 1]`.
pub fn lm_trace(model: &Model, chunk: &[u32], compression: &CompressionConfig) -> Result<Vec<(Vec<f32>, u32)>> {
    if chunk.len() < 2 {
        return Err(Error::Empty("language-model chunk needs at least two tokens"));
    }
    let mut state = DecodeState::new(model, compression.clone())?;
    let mut out = Vec::with_capacity(chunk.len() - 1);
    for pair in chunk.windows(2) {
        let (logits, _) = decode_step(model, &mut state, pair[0])?;
        out.push((logits, pair[1]));
    }
    Ok(out)
}

/// Splits `corpus` into consecutive non-overlapping chunks of `chunk_len`,
/// dropping the remainder.
pub fn corpus_chunks(corpus: &[u32], chunk_len: usize) -> Vec<Vec<u32>> {
    if chunk_len == 0 {
        return Vec::new();
    }
    corpus.chunks_exact(chunk_len).map(<[u32]>::to_vec).collect()
}

pub fn eval_lm(model: &Model, corpus: &[u32], chunk_len: usize, compression: &CompressionConfig) -> Result<EvalResult> {
    if chunk_len < 2 {
        return Err(Error::Task("chunk length must be at least 2".into()));
    }
    let chunks = corpus_chunks(corpus, chunk_len);
    if chunks.is_empty() {
        return Err(Error::Empty("corpus shorter than one chunk"));
    }
    compression.validate()?;
    let traces: Vec<(f64, usize, usize)> = chunks
        .par_iter()
        .map(|c| {
            let trace = lm_trace(model, c, compression)?;
            let nll: f64 = trace.iter().map(|(l, t)| cross_entropy(l, *t)).sum();
            let hits = trace.iter().filter(|(l, t)| argmax(l) == *t).count();
            Ok((nll, hits, trace.len()))
        })
        .collect::<Result<_>>()?;
    let (mut nll, mut hits, mut n) = (0.0, 0, 0);
    for (a, b, c) in traces {
        nll += a;
        hits += b;
        n += c;
    }
    let mut result = EvalResult::new(compression, hits as f64 / n as f64, chunks.len());
    result.perplexity = Some((nll / n as f64).exp());
    result.next_token_accuracy = Some(hits as f64 / n as f64);
    Ok(result)
}
