//! Seed derivation for reproducible Monte Carlo.
//!
//! Every draw is generated by a ChaCha stream keyed from `(master seed, index
//! path)`, so a sample's value depends only on its logical index and never on
//! traversal order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index-path domains, kept distinct so nested loops never share a stream.
pub mod domain {
    pub const FIELD: u64 = 0x46_4945_4c44;
    pub const XI: u64 = 0x5849;
    pub const ETA_FIRST: u64 = 0x4554_4131;
    pub const ETA_SECOND: u64 = 0x4554_4132;
    pub const INNER: u64 = 0x494e_4e52;
    pub const TEST_VECTORS: u64 = 0x5456_4543;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed and an index path into one well-distributed word.
pub fn mix(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &word in path {
        state = splitmix64(state ^ splitmix64(word));
    }
    state
}

/// Generator owned by `(seed, path)`; independent of every other path.
pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed, path);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
