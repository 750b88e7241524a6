//! Fixtures shared by the benchmarks.

use geodiff_core::{EmbeddingVector, ItemId, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random embeddings of width `dim`, ids `first_id..first_id + n`.
pub fn random_embeddings(n: usize, dim: usize, first_id: ItemId, seed: u64) -> Result<Vec<(ItemId, EmbeddingVector)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let v = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Ok((first_id + i as ItemId, EmbeddingVector::new(v)?))
        })
        .collect()
}
