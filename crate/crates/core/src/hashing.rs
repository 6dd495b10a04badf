//! Integer hashing shared by the policies and the seed schedule.

const MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

/// Multiply-shift hash of `key` into `2^bits` buckets.
pub fn multiply_shift(key: u64, bits: u32) -> usize {
    debug_assert!((1..=32).contains(&bits));
    (key.wrapping_mul(MULTIPLIER | 1) >> (64 - bits)) as usize
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one well-mixed seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5347_5300_0000_0000, |acc, &p| mix64(acc ^ mix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_in_range() {
        for key in 0..10_000u64 {
            assert!(multiply_shift(mix64(key), 12) < 4096);
        }
    }

    #[test]
    fn derived_seeds_differ_by_position() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 8, 9]), derive_seed(&[7, 8, 9]));
    }
}
