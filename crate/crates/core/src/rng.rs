//! Seeded random streams.
//!
//! One experiment seed fans out into named sub-streams, so that adding a
//! consumer in one module never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the sub-stream `label` of the experiment seed.
pub fn substream(seed: u64, label: &str) -> Stream {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(label)))
}

/// Counter-addressed stream: the draws for `(label, counter)` do not depend on
/// how many other counters were consumed before.
pub fn counter_stream(seed: u64, label: &str, counter: u64) -> Stream {
    let mut rng = substream(seed, label);
    rng.set_stream(counter);
    rng
}
