pub mod aggbench;
pub mod learn;
pub mod privacy;
pub mod scaling;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic per-cell stream derived from the run seed.
pub(crate) fn cell_rng(seed: u64, cell: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream = cell.iter().fold(0u64, |acc, &c| acc.wrapping_mul(1_000_003).wrapping_add(c));
    rng.set_stream(stream);
    rng
}
