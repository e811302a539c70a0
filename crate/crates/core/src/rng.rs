//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`) seeded
//! through `SeedableRng::seed_from_u64`. Independent consumers of one seed
//! use distinct ChaCha stream ids, so adding a consumer never shifts the
//! draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for sub-stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Stream ids, one per consumer.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const MIXTURE: u64 = 2;
    pub const MASKING: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const NEGATIVES: u64 = 5;
    pub const CORPUS: u64 = 6;
    pub const NEEDLE: u64 = 7;
    pub const SEPARABLE: u64 = 8;
}
