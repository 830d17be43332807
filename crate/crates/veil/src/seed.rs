//! Deterministic seed derivation.
//!
//! Every random choice in the crate flows from one master seed through
//! named streams, so runs reproduce exactly and adding a consumer never
//! shifts another consumer's draws.

/// Derives a child seed from `base` and a stream name (FNV-1a over the
/// name, folded into the base with an avalanche mix).
pub fn derive_seed(base: u64, stream: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for byte in stream.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Indexed variant for per-item streams.
pub fn derive_seed_indexed(base: u64, stream: &str, index: u64) -> u64 {
    mix(derive_seed(base, stream) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "split"), derive_seed(7, "split"));
        assert_ne!(derive_seed(7, "split"), derive_seed(7, "pairing"));
        assert_ne!(derive_seed(7, "split"), derive_seed(8, "split"));
        assert_ne!(
            derive_seed_indexed(7, "img", 0),
            derive_seed_indexed(7, "img", 1)
        );
    }
}
