//! Seeded RNG construction and seed derivation.
//!
//! Every run owns two independent streams: one for mini-batch shuffling and
//! one for noise draws, so changing the batch size leaves the noise sequence
//! untouched. Seeds for grid runs are derived from (master seed, arm id,
//! seed index) so a single arm can be reproduced without re-running the grid.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

// splitmix64 finalizer; good enough to decorrelate derived seeds
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable seed for (master seed, label, index).
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    mix(master ^ fnv1a(label.as_bytes()).rotate_left(17) ^ mix(index))
}

/// The two per-run streams: (batch shuffling, noise draws).
pub fn run_streams(seed: u64) -> (ChaCha12Rng, ChaCha12Rng) {
    (
        seeded_rng(derive_seed(seed, "batch", 0)),
        seeded_rng(derive_seed(seed, "noise", 0)),
    )
}

/// A draw from `N(0, sigma^2 I_d)`.
pub fn gaussian_vector(rng: &mut ChaCha12Rng, d: usize, sigma: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}
