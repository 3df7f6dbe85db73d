//! Deterministic RNG derivation.
//!
//! Every random decision in the pipeline flows from one master seed. Derived
//! streams mix the master seed with a list of tags (subsystem id, clip index,
//! step number, ...) so that parallel workers draw from independent streams
//! whose content does not depend on scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive tag values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build a ChaCha8 stream keyed by `master` and a tag path.
pub fn derive(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(master);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    let mut seed = [0u8; 32];
    let mut s = state;
    for chunk in seed.chunks_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
