//! Stateless seed derivation.
//!
//! Every random draw in a run derives from the master seed plus structural
//! coordinates (step, group, rollout, item). Nothing consumes a shared
//! generator, so resuming from a checkpoint or fanning work out to threads
//! reproduces the exact same streams.

/// Domain tags keep unrelated derivations from colliding.
pub mod domain {
    pub const DATA_ORDER: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const EVAL_ITEM: u64 = 3;
    pub const INIT: u64 = 4;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes the parts into one 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    let mut acc = 0x50_47_52_50u64; // "PGRP"
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}
