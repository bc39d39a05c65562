//! Toy caption vocabulary. Embeddings live in the model as a learned table.

use crate::error::{Result, StivError};

/// Caption words; index 0 is the reserved null token standing in for the empty prompt.
pub const VOCAB: &[&str] = &[
    "<null>", "a", "red", "green", "blue", "square", "circle", "triangle", "moves", "slowly",
    "quickly", "up", "down", "left", "right",
];

pub const NULL_TOKEN: usize = 0;

pub fn token_id(word: &str) -> Result<usize> {
    VOCAB
        .iter()
        .position(|&w| w == word)
        .ok_or_else(|| StivError::Invalid(format!("unknown caption token `{word}`")))
}

/// Splits on whitespace; an empty caption maps to the null token.
pub fn tokenize(caption: &str) -> Result<Vec<usize>> {
    let ids = caption.split_whitespace().map(token_id).collect::<Result<Vec<_>>>()?;
    Ok(if ids.is_empty() { null_text() } else { ids })
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| VOCAB.get(i).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn null_text() -> Vec<usize> {
    vec![NULL_TOKEN]
}

pub fn is_null(ids: &[usize]) -> bool {
    ids == [NULL_TOKEN]
}
