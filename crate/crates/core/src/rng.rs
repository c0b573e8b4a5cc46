//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator whose seed is
//! derived from a master seed and a list of integer coordinates (experiment
//! cell, seed index, component id, ...). The derivation is a SplitMix64
//! chain: `s0 = mix(master)`, `s_{i+1} = mix(s_i ^ mix(coord_i + i + 1))`.
//! Streams therefore depend only on coordinates, never on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a coordinate path.
pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .enumerate()
        .fold(splitmix64(master), |acc, (i, &c)| {
            splitmix64(acc ^ splitmix64(c.wrapping_add(i as u64 + 1)))
        })
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, coords: &[u64]) -> ChaCha8Rng {
    rng_from_seed(derive_seed(master, coords))
}
