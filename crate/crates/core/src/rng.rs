//! Seeded randomness.
//!
//! Every stochastic choice draws from ChaCha8, a counter-based stream cipher
//! generator. A component never shares a stream with another: it asks for
//! `stream(seed, label)`, where the label names the component ("init",
//! "shuffle/task3", ...). The 64-bit seed keys the generator and the label
//! (hashed with FNV-1a) selects the ChaCha stream id, so adding a new consumer
//! never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// A 64-bit sub-seed for `label`, for APIs that take a seed rather than a generator.
pub fn derive(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label).next_u64()
}
