//! Deterministic seed derivation.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent seed for a named sub-stream of `base`.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    mix64(base ^ mix64(fnv1a(tag.as_bytes())))
}

/// Seed of the `index`-th item of a family rooted at `base`.
pub fn indexed_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}
