//! Byte-level tokenizer with four reserved control tokens.

use std::collections::BTreeSet;

pub const BOS: u32 = 256;
pub const MARKER_OPEN: u32 = 257;
pub const MARKER_CLOSE: u32 = 258;
pub const QUERY: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub const SPECIAL_IDS: [u32; 4] = [BOS, MARKER_OPEN, MARKER_CLOSE, QUERY];

/// Byte ids of the 32 ASCII punctuation characters.
pub const PUNCT_IDS: [u32; 32] = {
    let chars = *b"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    let mut out = [0u32; 32];
    let mut i = 0;
    while i < 32 {
        out[i] = chars[i] as u32;
        i += 1;
    }
    out
};

/// Token ids of the ASCII digits `0`..=`9`.
pub const DIGIT_IDS: [u32; 10] = [48, 49, 50, 51, 52, 53, 54, 55, 56, 57];

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]. Control tokens have no byte form and are skipped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

pub fn is_special(token: u32) -> bool {
    SPECIAL_IDS.contains(&token)
}

pub fn special_set() -> BTreeSet<u32> {
    SPECIAL_IDS.into_iter().collect()
}

pub fn punctuation_set() -> BTreeSet<u32> {
    PUNCT_IDS.into_iter().collect()
}

/// Printable rendering for dumps and logs.
pub fn token_label(token: u32) -> String {
    match token {
        BOS => "<bos>".into(),
        MARKER_OPEN => "<open>".into(),
        MARKER_CLOSE => "<close>".into(),
        QUERY => "<query>".into(),
        t if (0x20..0x7f).contains(&t) => (t as u8 as char).to_string(),
        t => format!("<0x{t:02x}>"),
    }
}
