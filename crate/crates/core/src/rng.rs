//! Seeded random streams.
//!
//! Every random draw comes from a ChaCha12 generator keyed by a master seed
//! and a domain tag, with the ChaCha stream id selecting an independent
//! sequence (a replication, a cluster). Because the generator is
//! counter-based, the draws for stream `i` do not depend on how many other
//! streams were consumed first, so parallel and serial runs agree.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Domain tags keep streams for different purposes apart under one seed.
pub mod domain {
    pub const FIRST_STAGE: u64 = 0x0F17_57A6;
    pub const SECOND_STAGE: u64 = 0x5EC0_57A6;
    pub const POPULATION: u64 = 0x9090_1A71;
    pub const SAMPLING: u64 = 0x5A3F_11E5;
    pub const REPLICATION: u64 = 0x4E71_CA7E;
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

/// Generator for stream `stream` under (`seed`, `domain`).
pub fn stream(seed: u64, domain: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, domain));
    rng.set_stream(stream);
    rng
}
