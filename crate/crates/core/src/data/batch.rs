//! Deterministic shuffled batching.

use rand::seq::SliceRandom;

use crate::rng::RngState;

/// Shuffle ids 0..n with the seed and cut into `batch_size` chunks; the
/// final short batch is kept. Every id appears exactly once.
pub fn make_batches(n: usize, batch_size: usize, seed: RngState) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seed.stream());
    ids.chunks(batch_size).map(|c| c.to_vec()).collect()
}
