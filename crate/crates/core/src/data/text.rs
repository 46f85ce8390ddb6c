//! Closed-vocabulary tokenizer.

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const FIRST_WORD_ID: usize = 3;

/// Every word the scene templates can produce, in id order.
pub const WORDS: [&str; 12] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "square", "circle", "triangle", "left",
    "of", "largest",
];

pub fn word_id(word: &str) -> Option<usize> {
    WORDS.iter().position(|&w| w == word).map(|i| i + FIRST_WORD_ID)
}

/// `[CLS] words.. [SEP] [PAD]..` padded to `len`; words past `len - 2`
/// are dropped. The mask is `true` at padding positions.
pub fn tokenize(text: &str, len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if len < 2 {
        return Err(Error::invalid("tokenize", "length must be >= 2"));
    }
    let mut ids = vec![CLS_ID];
    for w in text.split_whitespace() {
        let id = word_id(w).ok_or_else(|| Error::invalid("tokenize", format!("unknown word `{w}`")))?;
        if ids.len() < len - 1 {
            ids.push(id);
        }
    }
    ids.push(SEP_ID);
    let used = ids.len();
    ids.resize(len, PAD_ID);
    let mask = (0..len).map(|i| i >= used).collect();
    Ok((ids, mask))
}

/// Inverse of [`tokenize`] for untruncated text.
pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&i| i >= FIRST_WORD_ID)
        .filter_map(|&i| WORDS.get(i - FIRST_WORD_ID).copied())
        .collect::<Vec<_>>()
        .join(" ")
}
