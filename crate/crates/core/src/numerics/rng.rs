//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`)
//! seeded through `SeedableRng::seed_from_u64`. Independent consumers of
//! one run seed take separate ChaCha streams so adding draws in one place
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `stream` of the generator for `seed`.
pub fn stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SELECTOR_INIT: u64 = 4;
    pub const DENSE_INIT: u64 = 5;
    pub const DATA_TEST: u64 = 6;
}
