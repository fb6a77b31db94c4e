//! Deterministic derivation of independent RNG streams from one master
//! seed. Derived streams make per-pair dataset construction and per-epoch
//! training order-independent and resumable: the stream for (seed, tags)
//! never depends on how many draws other streams made.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix `tags` into `base`, one mixing round per tag.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &t in tags {
        h = splitmix64(h ^ t);
    }
    h
}
