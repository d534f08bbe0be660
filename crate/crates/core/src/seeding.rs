//! Deterministic random streams derived from a master seed.
//!
//! A stream is identified by `(master, stage, index)`. The stage label is hashed with
//! FNV-1a, then combined with the master seed and the index through SplitMix64 finalizers.
//! The resulting 64-bit value seeds a ChaCha8 generator, so replicas can be generated in
//! any order or in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let base = splitmix64(master ^ splitmix64(fnv1a(stage)));
    splitmix64(base ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(master: u64, stage: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, stage, index))
}

/// Child stream of an existing generator, for nested fan-out inside library routines.
pub fn fork(rng: &mut impl rand::Rng) -> StreamRng {
    StreamRng::seed_from_u64(rng.next_u64())
}

/// Number of independent work shards used by sharded Monte Carlo loops. Fixed so that
/// results do not depend on the thread count.
pub const SHARDS: usize = 32;

/// Splits `total` work items into [`SHARDS`] chunks, each with its own stream forked from
/// `rng`, runs them in parallel and returns the per-shard results in shard order.
pub fn sharded<T, F>(total: usize, rng: &mut (impl rand::Rng + ?Sized), f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut StreamRng) -> T + Sync,
{
    use rayon::prelude::*;
    let shards = SHARDS.min(total.max(1));
    let seeds: Vec<u64> = (0..shards).map(|_| rng.next_u64()).collect();
    seeds
        .into_par_iter()
        .enumerate()
        .map(|(k, seed)| {
            let count = total / shards + usize::from(k < total % shards);
            let mut local = StreamRng::seed_from_u64(seed);
            f(count, &mut local)
        })
        .collect()
}
