//! Synthetic retrieval prompts: passkey and needle-in-a-haystack.

use serde::{Deserialize, Serialize};

use super::tokenizer::{tokenize, BOS, DIGIT_IDS, MARKER_CLOSE, MARKER_OPEN, QUERY};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Repeating digit-free filler for passkey prompts.
pub const PASSKEY_FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalTask {
    Passkey,
    Needle,
}

impl RetrievalTask {
    pub fn generate(self, seed: u64, total_len: usize, depth_fraction: f64, key_len: usize) -> Result<RetrievalSample> {
        match self {
            Self::Passkey => gen_passkey(seed, total_len, depth_fraction, key_len),
            Self::Needle => gen_needle(seed, total_len, depth_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSample {
    /// The prompt, ending in the query cue.
    pub tokens: Vec<u32>,
    /// `(start, length)` of the planted answer inside `tokens`.
    pub answer_span: (usize, usize),
    /// The tokens a correct model generates after the prompt.
    pub passkey_tokens: Vec<u32>,
    pub depth_fraction: f64,
}

impl RetrievalSample {
    /// Teacher-forcing input for training: the prompt followed by all but
    /// the last answer token. With `answer_only`, every target outside the
    /// answer is ignored; otherwise the model is also trained to predict
    /// the prompt itself.
    pub fn training_pair(&self, answer_only: bool) -> (Vec<u32>, Vec<Option<u32>>) {
        let answer = &self.passkey_tokens;
        let mut input = self.tokens.clone();
        input.extend_from_slice(&answer[..answer.len() - 1]);
        let mut full = self.tokens[1..].to_vec();
        full.extend_from_slice(answer);
        let prompt_targets = self.tokens.len() - 1;
        let targets = full
            .into_iter()
            .enumerate()
            .map(|(i, t)| (!answer_only || i >= prompt_targets).then_some(t))
            .collect();
        (input, targets)
    }

    pub fn is_correct(&self, generated: &[u32]) -> bool {
        generated == self.passkey_tokens.as_slice()
    }
}

fn check_depth(depth_fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&depth_fraction) {
        return Err(Error::Task(format!("depth fraction {depth_fraction} outside [0, 1]")));
    }
    Ok(())
}

fn filler_total(total_len: usize, overhead: usize, what: &str) -> Result<usize> {
    total_len
        .checked_sub(overhead)
        .ok_or_else(|| Error::Task(format!("{what} of length {total_len} cannot hold {overhead} fixed tokens")))
}

/// Builds `BOS, filler, OPEN, key digits, CLOSE, filler, QUERY`, with the
/// opening marker placed after `round(depth × filler)` filler tokens. The
/// filler is a fixed sentence cycle starting at a seeded offset.
pub fn gen_passkey(seed: u64, total_len: usize, depth_fraction: f64, key_len: usize) -> Result<RetrievalSample> {
    check_depth(depth_fraction)?;
    if key_len == 0 {
        return Err(Error::Task("passkey needs at least one digit".into()));
    }
    let filler = filler_total(total_len, key_len + 4, "passkey prompt")?;
    let mut rng = SplitMix64::new(seed);
    let key: Vec<u32> = (0..key_len).map(|_| DIGIT_IDS[rng.below(10)]).collect();
    let cycle = tokenize(PASSKEY_FILLER.as_bytes());
    let offset = rng.below(cycle.len());
    let mut text = cycle.iter().cycle().skip(offset).copied();
    let prefix = (depth_fraction * filler as f64).round() as usize;

    let mut tokens = Vec::with_capacity(total_len);
    tokens.push(BOS);
    tokens.extend(text.by_ref().take(prefix));
    tokens.push(MARKER_OPEN);
    let start = tokens.len();
    tokens.extend_from_slice(&key);
    tokens.push(MARKER_CLOSE);
    tokens.extend(text.take(filler - prefix));
    tokens.push(QUERY);
    Ok(RetrievalSample {
        tokens,
        answer_span: (start, key_len),
        passkey_tokens: key,
        depth_fraction,
    })
}

const NEEDLE_FILLER: &[u8] = b"abcdefghijklmnopqrstuvwxyz     .,";

/// Builds `BOS, filler, OPEN, key, value, CLOSE, filler, QUERY, key`, where
/// the key is an uppercase letter and the value a digit. The filler is
/// seeded random lowercase text, so neither symbol class occurs in it.
pub fn gen_needle(seed: u64, total_len: usize, depth_fraction: f64) -> Result<RetrievalSample> {
    check_depth(depth_fraction)?;
    let filler = filler_total(total_len, 7, "needle prompt")?;
    let mut rng = SplitMix64::new(seed);
    let key = (b'A' + rng.below(26) as u8) as u32;
    let value = DIGIT_IDS[rng.below(10)];
    let mut text = std::iter::repeat_with(|| NEEDLE_FILLER[rng.below(NEEDLE_FILLER.len())] as u32);
    let prefix = (depth_fraction * filler as f64).round() as usize;

    let mut tokens = Vec::with_capacity(total_len);
    tokens.push(BOS);
    tokens.extend(text.by_ref().take(prefix));
    tokens.extend([MARKER_OPEN, key, value, MARKER_CLOSE]);
    let start = tokens.len() - 2;
    tokens.extend(text.take(filler - prefix));
    tokens.extend([QUERY, key]);
    Ok(RetrievalSample {
        tokens,
        answer_span: (start, 1),
        passkey_tokens: vec![value],
        depth_fraction,
    })
}

/// Solves a needle prompt by direct lookup: finds the queried key and
/// returns the value planted next to it.
pub fn needle_answer(tokens: &[u32]) -> Option<u32> {
    let (&key, rest) = tokens.split_last()?;
    if rest.last() != Some(&QUERY) {
        return None;
    }
    rest.windows(4)
        .find(|w| w[0] == MARKER_OPEN && w[1] == key && w[3] == MARKER_CLOSE)
        .map(|w| w[2])
}
