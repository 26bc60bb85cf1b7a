//! Stub text encoder: every lower-cased word maps to a fixed pseudo-random
//! vector seeded by a hash of the word, so prompts become bags of word
//! tokens without any vocabulary.
//!
//! Like the tokenizers of real text encoders, every encoding is wrapped in
//! start and end tokens, so even the empty prompt yields a non-empty
//! context. Guidance's unconditional branch is the encoding of `""`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::rng;

/// Marker words that cannot come out of [`tokenize`].
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

/// Splits a prompt into lower-case alphanumeric words.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    /// Unit-variance embedding of one word.
    pub fn word(&self, word: &str) -> Array1<f64> {
        let mut r = rng::stream(self.seed, &format!("word/{}", word.to_lowercase()));
        rng::normal(&mut r, self.dim, 1.0)
    }

    /// `[(n_words + 2) × dim]` token matrix: start token, words, end token.
    pub fn encode(&self, prompt: &str) -> Array2<f64> {
        let mut words = vec![START_TOKEN.to_string()];
        words.extend(tokenize(prompt));
        words.push(END_TOKEN.to_string());
        let mut out = Array2::zeros((words.len(), self.dim));
        for (mut row, w) in out.rows_mut().into_iter().zip(&words) {
            row.assign(&self.word(w));
        }
        out
    }

    /// Mean of the word vectors (no start/end tokens), or `None` for a
    /// prompt without words.
    pub fn pooled(&self, prompt: &str) -> Option<Array1<f64>> {
        let words = tokenize(prompt);
        if words.is_empty() {
            return None;
        }
        let mut acc = Array1::zeros(self.dim);
        for w in &words {
            acc += &self.word(w);
        }
        Some(acc / words.len() as f64)
    }
}
