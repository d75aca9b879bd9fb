use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for the `index`-th independent stream of a seeded computation.
///
/// Streams depend only on `(seed, index)`, so hypothesis `i` of a RANSAC loop
/// draws the same samples no matter which thread evaluates it.
pub(crate) fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
