//! Deterministic stand-in for a text encoder.
//!
//! Prompts are whitespace-tokenized and each distinct token maps to a fixed
//! pseudo-random vector derived from its bytes, so equal prompts embed
//! identically across runs and processes. A constant start vector is always
//! prepended: it gives cross-attention at least two keys on real prompts and
//! exactly one well-defined key for the empty prompt used by
//! classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{derive_seed, Tensor};

/// Embedded prompt: `vectors` is `[tokens, dim]` with the start token first.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vectors: Tensor,
    pub source: String,
}

impl TextEmbedding {
    pub fn tokens(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Hash-seeded token embedder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashedTextEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashedTextEmbedder {
    fn default() -> Self {
        HashedTextEmbedder { dim: 16, seed: 0x7465_7874 }
    }
}

impl HashedTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashedTextEmbedder { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, token));
        Tensor::randn(&[self.dim], &mut rng).into_data()
    }

    /// Embeds a prompt. The start vector (the embedding of an out-of-band
    /// marker) is always row 0; the empty prompt embeds as just that row.
    pub fn embed(&self, prompt: &str) -> TextEmbedding {
        let mut rows: Vec<Vec<f64>> = vec![self.token_vector("\u{0}start")];
        for token in prompt.split_whitespace() {
            let lowered = token.to_lowercase();
            rows.push(self.token_vector(&lowered));
        }
        let tokens = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        TextEmbedding {
            vectors: Tensor::from_vec(&[tokens, self.dim], data),
            source: prompt.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_deterministic() {
        let e = HashedTextEmbedder::default();
        let a = e.embed("a red striped shirt");
        let b = e.embed("a red striped shirt");
        assert_eq!(a.vectors, b.vectors);
        assert_eq!(a.tokens(), 5);
        assert_eq!(a.dim(), 16);
    }

    #[test]
    fn empty_prompt_is_the_lone_start_token() {
        let e = HashedTextEmbedder::default();
        let empty = e.embed("");
        assert_eq!(empty.tokens(), 1);
        let full = e.embed("anything");
        assert_eq!(
            empty.vectors.data(),
            &full.vectors.data()[..e.dim],
            "start row must match across prompts"
        );
    }

    #[test]
    fn token_identity_not_position_decides_the_vector() {
        let e = HashedTextEmbedder::default();
        let ab = e.embed("alpha beta");
        let ba = e.embed("beta alpha");
        let d = e.dim;
        assert_eq!(&ab.vectors.data()[d..2 * d], &ba.vectors.data()[2 * d..3 * d]);
        assert_ne!(&ab.vectors.data()[d..2 * d], &ab.vectors.data()[2 * d..3 * d]);
    }

    #[test]
    fn case_is_folded_and_whitespace_collapsed() {
        let e = HashedTextEmbedder::default();
        assert_eq!(e.embed("Red  Shirt").vectors, e.embed("red shirt").vectors);
    }

    #[test]
    fn different_seeds_give_different_spaces() {
        let a = HashedTextEmbedder::new(8, 1).embed("shirt");
        let b = HashedTextEmbedder::new(8, 2).embed("shirt");
        assert!(a.vectors.max_abs_diff(&b.vectors) > 1e-3);
    }
}
