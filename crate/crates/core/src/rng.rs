//! Seed derivation. Every random stream in a run is keyed by the master seed
//! plus a stable label, so adding a stage never shifts another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer, spreads FNV output over all bits.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named stage of a run.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    mix(fnv1a(h, stage.as_bytes()))
}

/// Seed for an indexed sub-stream (per user, per ratio, ...) of a stage.
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    mix(fnv1a(fnv1a(FNV_OFFSET, &seed.to_le_bytes()), &index.to_le_bytes()))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
