//! Platform-independent seeding.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` built by
//! [`seeded`]: `ChaCha8Rng::seed_from_u64(seed)` (the `rand_core` PCG32 key
//! expansion) followed by `set_stream(stream)`. Distinct purposes use
//! distinct stream ids so that, for the same integer seed, a split, an
//! episode, a dropout mask and an initialisation never share a keystream.
//!
//! Integer draws go through [`below`], which is a fixed rejection sampler on
//! `next_u64` and does not depend on `rand`'s distribution internals.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids. Fixed forever; changing one changes every derived result.
pub mod stream {
    pub const EPISODE: u64 = 0;
    pub const SPLIT_BASE: u64 = 1 << 32;
    pub const MONITOR: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRANSFORM: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "below(0)");
    let n = n as u64;
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = (rng.next_u64() as u128) * (n as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as usize;
        }
    }
}

/// Uniform real in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Fisher-Yates, walking from the back.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Partial Fisher-Yates: after the call, `items[..k]` is a uniform draw of
/// `k` distinct elements in draw order.
pub fn choose_prefix<T>(rng: &mut impl RngCore, items: &mut [T], k: usize) {
    let n = items.len();
    assert!(k <= n, "cannot draw {k} of {n}");
    for i in 0..k {
        let j = i + below(rng, n - i);
        items.swap(i, j);
    }
}
