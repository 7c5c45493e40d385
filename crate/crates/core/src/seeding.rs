//! Deterministic seed derivation.
//!
//! Every stochastic step of a run draws from its own generator whose seed is
//! derived from the run seed and a path of tags (iteration, phase, replica...).
//! Resuming from a checkpoint therefore needs no generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`. Distinct tag paths give unrelated seeds.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Tags naming the independent random streams of a run.
pub mod stream {
    pub const JACOBIAN: u64 = 1;
    pub const WALK: u64 = 2;
    pub const BRANCH_EVAL: u64 = 3;
    pub const SEARCH_EVAL: u64 = 4;
    pub const XNES: u64 = 5;
    pub const RESTART: u64 = 6;
    pub const INIT: u64 = 7;
    pub const WALKED_EVAL: u64 = 8;
    pub const CORRECTION: u64 = 9;
}
